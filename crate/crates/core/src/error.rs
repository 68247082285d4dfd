//! Shared error type for the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A layer or model was built with inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a documented precondition.
    #[error("input error: {0}")]
    Input(String),

    /// Caller broke an operation contract (e.g. non-scalar loss head).
    #[error("contract error: {0}")]
    Contract(String),

    /// A file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Unsupported or corrupt on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// A metric has no defined value for the given inputs (e.g. zero matched
    /// pairs). Distinct from a legitimate 0.0 result.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training diverged (non-finite loss).
    #[error("divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
