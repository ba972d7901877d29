//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad grammar, empty lexicon, odd hidden size, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A character has no glyph or no vocabulary entry.
    #[error("unknown character {0:?} in {1}")]
    UnknownChar(char, &'static str),

    /// Out-of-range block extraction or index.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// Tensor shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Checkpoint serialization/validation failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at phase {phase}, step {step}: loss is not finite")]
    Diverged { phase: usize, step: usize },

    /// Dataset or evaluation input problem.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn bounds(msg: impl Into<String>) -> Self {
        Error::Bounds(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
