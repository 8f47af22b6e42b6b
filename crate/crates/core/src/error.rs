use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("undefined input: {0}")]
    UndefinedInput(String),
    #[error("no precomputed embedding for prompt {0:?}")]
    MissingEmbedding(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("placement failed: placed {achieved} of {requested} boxes")]
    Capacity { achieved: usize, requested: usize },
    #[error("non-finite loss at step {step}: first non-finite gradient in `{param}`")]
    NonFinite { step: usize, param: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error came from the filesystem or a file's contents.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn validation_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
