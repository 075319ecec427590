//! Tensors, reverse-mode differentiation and dense matrix utilities.

mod graph;
mod linalg;
mod tensor;

pub use graph::{Activation, Bindings, Graph, NodeId};
pub use linalg::{
    jacobian_fd, log_abs_det, logdet_and_trace, slogdet, spectral_norm, spectral_norm_exact,
    DEFAULT_FD_EPS,
};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `[rows, cols]` matrix of i.i.d. standard normals.
pub fn standard_normal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dimensions")
}
