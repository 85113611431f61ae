use std::path::PathBuf;

/// Errors produced anywhere in the pre-training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("rejected configuration: {0}")]
    InvalidConfig(String),

    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{}: not found", .0.display())]
    NotFound(PathBuf),

    #[error("checkpoint does not match the model:\n  {}", .0.join("\n  "))]
    CheckpointMismatch(Vec<String>),

    #[error("non-finite loss term `{term}` at step {step}")]
    NonFinite { term: &'static str, step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
