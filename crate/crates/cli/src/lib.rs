//! Config-driven experiment runner: training, baselines, theory checks,
//! trade-off curves and plots.

pub mod config;
pub mod error;
pub mod eval;
pub mod plot;
pub mod runner;
pub mod theory;

pub use config::{ExperimentConfig, Method};
pub use error::{CliError, CliResult};
