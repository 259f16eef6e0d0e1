use thiserror::Error;

/// Errors raised by grid operators, propagation, metrics and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid sample position ({x}, {y})")]
    InvalidPosition { x: f64, y: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid affinity: {0}")]
    InvalidAffinity(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid feature map: {0}")]
    InvalidFeature(String),
    #[error("invalid confidence: {0}")]
    InvalidConfidence(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("no valid ground-truth pixels")]
    EmptyGroundTruth,
    #[error("sparse input has no valid pixels")]
    EmptySparse,
    #[error("loss evaluated to a non-finite value")]
    NonFiniteLoss,
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("optimization diverged at step {step}")]
    Diverged { step: usize },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
