use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u32 },

    #[error("truncated input at byte offset {offset}: {what}")]
    Truncated { offset: usize, what: String },

    #[error("non-finite value at byte offset {offset} ({what})")]
    NonFinite { offset: usize, what: String },

    #[error("malformed input at byte offset {offset}: {what}")]
    Malformed { offset: usize, what: String },

    #[error("field does not fit the format: {0}")]
    FormatOverflow(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("incompatible covariance kind: {0}")]
    IncompatibleCovariance(String),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("backward called without a forward cache")]
    MissingCache,
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::InvalidData(msg.into())
    }
}
