//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, DrslError>;

#[derive(Debug, thiserror::Error)]
pub enum DrslError {
    /// A configuration value violates its documented constraints.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Tensor or map dimensions do not satisfy an operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training diverged (non-finite loss or parameter).
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    /// A required input (checkpoint, manifest, pseudo-labels) is missing.
    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
}

impl DrslError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DrslError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn decode(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        DrslError::Decode {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
