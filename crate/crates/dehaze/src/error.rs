//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DehazeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode/encode error at {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: term `{term}` = {value}")]
    NonFiniteLoss {
        step: u64,
        term: String,
        value: f64,
    },
}

impl DehazeError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DehazeError::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        DehazeError::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DehazeError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DehazeError>;
