//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or value violates an operation's preconditions. The message
    /// names the offending axis or field.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A forward pass produced a non-finite value.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// Cosine similarity requested against a zero-norm vector.
    #[error("degenerate similarity: {0}")]
    DegenerateSimilarity(String),

    /// A name lookup failed: unknown parameter, domain, or empty bank.
    #[error("inventory error: {0}")]
    Inventory(String),

    /// Checkpoint container and manifest disagree, or the archive is unreadable.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// A dataset file failed to load; `path` names the file.
    #[error("failed to load {path}: {reason}")]
    DataLoad { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
