//! Matrix utilities: finite-difference Jacobians, log-determinants and
//! spectral norms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Central-difference Jacobian of `map` at `x`, shape `[d_out, d_in]`.
pub fn jacobian_fd<F>(map: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    let d_in = x.len();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(d_in);
    let mut d_out = 0;
    for j in 0..d_in {
        let mut plus = x.clone();
        plus.data_mut()[j] += eps;
        let mut minus = x.clone();
        minus.data_mut()[j] -= eps;
        let fp = map(&plus)?;
        let fm = map(&minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "map output at probe x ± {eps}·e_{j} (x = {:?})",
                x.data()
            )));
        }
        d_out = fp.len();
        columns.push(
            fp.data()
                .iter()
                .zip(fm.data())
                .map(|(a, b)| (a - b) / (2.0 * eps))
                .collect(),
        );
    }
    let mut jac = Tensor::zeros(&[d_out, d_in]);
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            jac.set(i, j, *v);
        }
    }
    Ok(jac)
}

/// LU factorization with partial pivoting, in place.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    sign: f64,
}

impl Lu {
    fn factor(m: &Tensor) -> Result<Self> {
        let (n, c) = m.dims2();
        if n != c {
            return Err(Error::Shape(format!("LU of non-square {:?}", m.shape())));
        }
        let mut lu = m.data().to_vec();
        let scale = m.max_abs().max(f64::MIN_POSITIVE);
        let tiny = f64::EPSILON * n as f64 * scale;
        let mut sign = 1.0;
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pivot > tiny) {
                return Err(Error::Singular(None));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                sign = -sign;
            }
            let piv = lu[k * n + k];
            for i in k + 1..n {
                let factor = lu[i * n + k] / piv;
                lu[i * n + k] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= factor * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, sign })
    }

    fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }
}

/// `log |det(M)|` via pivoted LU.
pub fn log_abs_det(m: &Tensor) -> Result<f64> {
    Ok(Lu::factor(m)?.log_abs_det())
}

/// Sign of `det(M)` (±1) alongside `log |det(M)|`.
pub fn slogdet(m: &Tensor) -> Result<(f64, f64)> {
    let lu = Lu::factor(m)?;
    let neg = (0..lu.n).filter(|&i| lu.lu[i * lu.n + i] < 0.0).count();
    let sign = if neg % 2 == 0 { lu.sign } else { -lu.sign };
    Ok((sign, lu.log_abs_det()))
}

/// `(Tr J, log |det(I + J)|)`.
pub fn logdet_and_trace(j: &Tensor) -> Result<(f64, f64)> {
    let (n, c) = j.dims2();
    if n != c {
        return Err(Error::Shape(format!("Jacobian {:?} is not square", j.shape())));
    }
    if !j.is_finite() {
        return Err(Error::NonFinite("Jacobian entries".into()));
    }
    let mut shifted = j.as_matrix();
    for i in 0..n {
        let v = shifted.get(i, i) + 1.0;
        shifted.set(i, i, v);
    }
    Ok((j.trace(), log_abs_det(&shifted)?))
}

/// Power-iteration estimate of the largest singular value of `m`.
///
/// The estimate is `‖M v_k‖` for `v_k ∝ (MᵀM)^k v_0` with a seeded Gaussian
/// start, which is a Rayleigh quotient of the PSD matrix `MᵀM`: it never
/// exceeds the true norm and does not decrease with more iterations.
pub fn spectral_norm(m: &Tensor, iters: usize, seed: u64) -> f64 {
    let (_, cols) = m.dims2();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let vt = Tensor::vector(v.clone());
        let mv = vt.matmul_t(m).expect("dimensions agree");
        estimate = mv.norm();
        if estimate == 0.0 {
            return 0.0;
        }
        // v ← Mᵀ M v
        v = mv.matmul(m).expect("dimensions agree").into_data();
    }
    estimate
}

/// Largest singular value from a dense symmetric eigensolve of `MᵀM`.
pub fn spectral_norm_exact(m: &Tensor) -> f64 {
    let (r, c) = m.dims2();
    let mat = nalgebra::DMatrix::from_row_slice(r, c, m.data());
    let gram = mat.transpose() * &mat;
    let eig = gram.symmetric_eigenvalues();
    eig.iter().fold(0.0_f64, |a, &b| a.max(b)).max(0.0).sqrt()
}
