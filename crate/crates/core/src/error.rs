use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image dimensions do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Private key is malformed (wrong length or encoding).
    #[error("key error: {0}")]
    Key(String),

    /// A file's byte layout does not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// A referenced identity, checkpoint, or record does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Operation requires state (e.g. a trained model) that is missing.
    #[error("state error: {0}")]
    State(String),

    /// Training produced a non-finite loss; carries a diagnostic dump.
    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
