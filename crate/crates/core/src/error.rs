use thiserror::Error;

/// Errors raised by reservoir construction, training and evaluation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is nilpotent or numerically zero (spectral radius {0:e}); redraw with a new seed")]
    NilpotentMatrix(f64),

    #[error("reservoir state became non-finite at step {step}")]
    NonFiniteState { step: usize },

    #[error("series diverged at step {step} (y = {value:e})")]
    DivergentSeries { step: usize, value: f64 },

    #[error("desired signal has zero variance")]
    ZeroVariance,

    #[error("normal equations are singular (condition estimate {condition:e})")]
    SingularSystem { condition: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("all {0} trials failed")]
    AllTrialsFailed(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
