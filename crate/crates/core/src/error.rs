//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A registered primitive produced a non-finite value. Carries the name
    /// of the first offending primitive and its node index on the tape.
    #[error("numeric failure in primitive '{op}' (node {node}): {detail}")]
    NumericFailure {
        op: &'static str,
        node: usize,
        detail: String,
    },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("calibration failure: {0}")]
    CalibrationFailure(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: String,
        actual: String,
        context: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
