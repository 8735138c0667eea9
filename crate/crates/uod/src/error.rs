//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UodError {
    /// A domain registry problem: duplicate name, unknown id, sealed registry.
    #[error("domain error: {0}")]
    Domain(String),

    /// Record or dataset content failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// On-disk dataset layout problems: missing files, malformed CSV, bad image.
    #[error("data error: {0}")]
    Data(String),

    /// Array shape or size is incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numeric failure: NaN loss, divergence, degenerate input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint container is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Bad configuration value.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, UodError>;

impl UodError {
    pub fn domain(msg: impl Into<String>) -> Self {
        UodError::Domain(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        UodError::Validation(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        UodError::Data(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        UodError::Shape(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        UodError::Numeric(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Self {
        UodError::Checkpoint(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        UodError::Config(msg.into())
    }
}
