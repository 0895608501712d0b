use thiserror::Error;

/// Errors produced by model construction, synthesis, and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown mode {0}")]
    UnknownMode(String),

    #[error("matrix exponential did not converge (input norm {norm:.3e})")]
    NumericOverflow { norm: f64 },

    #[error("state outside the controller domain: {0}")]
    OutOfDomain(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("synthesis failed: {0}")]
    Synthesis(crate::synthesis::FailureDiagnostics),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
