//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape disagreement between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training diverged (NaN/Inf loss).
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    /// Checkpoint integrity or version problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    /// Process exit code for this error class (documented in the CLI help).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Diverged { .. } => 3,
            Error::Checkpoint(_) | Error::Io(_) => 4,
        }
    }
}
