use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix I + J is singular to machine precision{}", context_suffix(.0))]
    Singular(Option<String>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {kind} variant `{name}`")]
    UnknownVariant { kind: &'static str, name: String },

    #[error("LoRA rank {rank} exceeds min(m, n) = {max} for layer {layer}")]
    RankTooLarge {
        layer: usize,
        rank: usize,
        max: usize,
    },

    #[error("rejection acceptance rate {rate:.2e} is below 1e-4; use the snis method instead")]
    LowAcceptance { rate: f64 },

    #[error("reward has no finite upper bound on the generator range; rejection sampling needs an envelope")]
    UnboundedReward,

    #[error("duplicate sample points produce zero nearest-neighbour distances")]
    DuplicatePoints,

    #[error("reverse-mode and finite-difference Jacobians disagree (max relative error {0:.3e})")]
    JacobianMismatch(f64),

    #[error("non-finite training loss at step {step}")]
    Diverged { step: usize },

    #[error("regularization breach at step {step}: l2 term {l2} exceeds ceiling {ceiling}")]
    RegularizationBreach { step: usize, l2: f64, ceiling: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint was written for generator {found}, refusing to load onto {expected}")]
    GeneratorMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn context_suffix(ctx: &Option<String>) -> String {
    match ctx {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}
