//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tensor ops, layers, training, and data loading.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument outside its documented domain (e.g. dropout rate >= 1).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Index or label outside its valid range.
    #[error("index error: {0}")]
    Index(String),

    /// A dataset-level problem: empty class, bad label, unreadable entry.
    #[error("data error: {0}")]
    Data(String),

    /// Failure while decoding an image or archive file.
    #[error("load error: {0}")]
    Load(String),

    /// An API contract was violated (non-scalar loss, unnormalized probabilities, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Inconsistent configuration (mismatched model specs in an ensemble, ...).
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn load(msg: impl Into<String>) -> Self {
        Error::Load(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
