//! Crate error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid basis dimension {0}: need dim >= 2")]
    InvalidDimension(usize),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("density-matrix invariant violated: {0}")]
    InvariantViolation(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("degenerate particle ensemble: all weights vanished")]
    DegenerateEnsemble,

    #[error("measurement record does not match parameters: {0}")]
    RecordMismatch(String),

    #[error("phase-space grid mismatch")]
    GridMismatch,

    #[error("field is not normalized: integral = {0}")]
    Unnormalized(f64),

    #[error("field has no positive mass")]
    NoPositiveMass(),

    #[error("trajectory logs have different lengths: {0} vs {1}")]
    LogLengthMismatch(usize, usize),

    #[error("configuration error:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
