use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or shape mismatch between a layer and its input.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API was used out of sequence (e.g. backward with a stale forward cache).
    #[error("usage error: {0}")]
    Usage(String),

    /// A documented precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The rehearsal buffer holds no entries to sample from.
    #[error("memory buffer is empty")]
    EmptyBuffer,

    /// Malformed binary input.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
