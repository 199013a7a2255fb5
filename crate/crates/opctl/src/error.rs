//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named tape op.
    #[error("shape mismatch in `{op}`: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A NaN or Inf appeared in a forward or backward pass.
    #[error("non-finite value produced by `{op}`{}", detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFinite {
        op: String,
        detail: Option<String>,
    },

    #[error("tape misuse: {0}")]
    TapeMisuse(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite {
            op: op.into(),
            detail: None,
        }
    }

    pub fn non_finite_at(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            op: op.into(),
            detail: Some(detail.into()),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
