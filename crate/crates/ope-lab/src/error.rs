//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by library operations.
///
/// `InvalidParameter` covers violated preconditions and malformed
/// configuration; `Numerical` covers failures of the linear-algebra layer
/// (singular systems, failed factorizations, residual checks).
#[derive(Debug, Error)]
pub enum OpeError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv failure on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl OpeError {
    /// Process exit status for the CLI: 1 for validation problems,
    /// 2 for numerical or runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            OpeError::InvalidParameter(_)
            | OpeError::DimensionMismatch { .. }
            | OpeError::IndexOutOfRange(_)
            | OpeError::Config(_) => 1,
            OpeError::EmptyDataset
            | OpeError::Numerical(_)
            | OpeError::Io { .. }
            | OpeError::Csv { .. } => 2,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        OpeError::InvalidParameter(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        OpeError::Numerical(msg.into())
    }
}
