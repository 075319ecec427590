//! Residual noise hypernetworks that steer a frozen generator toward a
//! reward-tilted output distribution, together with numerical oracles for
//! the underlying theory and the comparison baselines.

pub mod baselines;
pub mod error;
pub mod generators;
pub mod hypernet;
pub mod numcore;
pub mod objectives;
pub mod oracles;
pub mod rewards;
pub mod training;

pub use error::{Error, Result};
pub use numcore::{Activation, Graph, Tensor};
