use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unknown gallery id {0:?}")]
    Lookup(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Training { epoch: usize, loss: f64 },

    #[error("measurement failed: {0}")]
    Measurement(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Errors raised while decoding the binary gallery, query and parameter files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("file truncated inside header")]
    TruncatedHeader,

    #[error("file truncated inside entry {index}")]
    TruncatedEntry { index: usize },

    #[error("header declares {declared} entries but file holds {found}")]
    CountMismatch { declared: usize, found: usize },

    #[error("{0} unexpected trailing bytes after last entry")]
    TrailingBytes(usize),

    #[error("entry {index}: identifier is not valid UTF-8")]
    InvalidUtf8 { index: usize },
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
