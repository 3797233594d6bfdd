use std::path::PathBuf;

use thiserror::Error;

use crate::dpcore::DecayTree;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure in {what}: achieved relative error {achieved:.3e}")]
    NumericFailure { what: String, achieved: f64 },

    #[error("step too large: total event probability {total:.4} exceeds {limit}")]
    StepTooLarge { total: f64, limit: f64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("timeout: {reason}")]
    Timeout {
        reason: String,
        partial: Option<Box<DecayTree>>,
    },

    #[error("schema violation:\n  {}", .0.join("\n  "))]
    Schema(Vec<String>),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
