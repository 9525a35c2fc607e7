//! Error type shared by every module of the toolkit.

use thiserror::Error;

/// Toolkit-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument sits outside the admissible range of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent sizes, index maps or mask definitions.
    #[error("structural error: {0}")]
    Structure(String),

    /// An iterative solver stopped without reaching its tolerance.
    #[error("solver error: {msg} (residual {residual:.3e} after {iterations} iterations)")]
    Solver {
        msg: String,
        residual: f64,
        iterations: usize,
    },

    /// Spline fitting failed (rank-deficient or under-determined constraints).
    #[error("fit error: {0}")]
    Fit(String),

    /// A persisted file does not match the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn fit(msg: impl Into<String>) -> Self {
        Error::Fit(msg.into())
    }
}
