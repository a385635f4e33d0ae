//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input shape does not match the operator or tensor contract.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },

    /// Operation requires state that has not been created yet
    /// (e.g. a pseudoinverse requested before the SVD was computed).
    #[error("invalid state: {0}")]
    State(String),

    /// Invalid argument outside the shape contracts.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Landweber residual grew past the divergence guard.
    #[error(
        "landweber iteration diverged with stepsize {stepsize}: \
         residual grew from {initial:.6e} to {current:.6e}"
    )]
    Divergence {
        stepsize: f64,
        initial: f64,
        current: f64,
    },

    /// Non-finite value produced during training or loss evaluation.
    #[error("numerical fault: {0}")]
    Fault(String),

    /// Not enough samples to compute the requested statistic.
    #[error("statistics error: {0}")]
    Statistics(String),

    /// Stored data does not match its recorded hash.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
