//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that cannot be combined by the named operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A dataset or checkpoint file could not be decoded.
    #[error("parse error in {path} at record {record}: {msg}")]
    Parse {
        path: String,
        record: usize,
        msg: String,
    },

    /// Invalid experiment or model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A distance matrix with no Euclidean realization.
    #[error("non-realizable distance matrix: {0}")]
    NonRealizable(String),

    /// Runtime numerical failure (NaN gradients, diverged simulation, ...).
    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Exit code the CLI maps this error to: 1 for configuration
    /// problems, 2 for runtime/numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Dim { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
