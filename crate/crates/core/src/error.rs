use thiserror::Error;

use crate::grassmann::SubspacePoint;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum GsError {
    /// Input outside the domain of an operation (non-PD, singular, ill-conditioned).
    #[error("domain error: {0}")]
    Domain(String),
    /// Inconsistent arguments (dimension or base-point mismatch, missing options).
    #[error("usage error: {0}")]
    Usage(String),
    /// The measure admits no GE; `witness` is a subspace with negative I_P.
    #[error("existence error: {message}")]
    Existence {
        message: String,
        witness: Option<SubspacePoint>,
    },
    /// Linearization operator not invertible on the tangent space.
    #[error("degeneracy error: {0}")]
    Degeneracy(String),
    /// No escape direction could be extracted.
    #[error("empty flag: {0}")]
    EmptyFlag(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, GsError>;

impl From<csv::Error> for GsError {
    fn from(e: csv::Error) -> Self {
        GsError::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for GsError {
    fn from(e: serde_json::Error) -> Self {
        GsError::Parse(e.to_string())
    }
}
