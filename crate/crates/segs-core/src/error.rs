use thiserror::Error;

/// Errors produced by the core operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an operation's inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// I/O failure while reading or writing an artifact.
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// CSV encode/decode failure.
    #[error(transparent)]
    Csv(#[from] csv::Error),
    /// JSON encode/decode failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
