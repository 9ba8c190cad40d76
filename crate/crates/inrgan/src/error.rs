//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or graph node received data of the wrong shape.
    #[error("shape mismatch at {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    /// A configuration value failed validation.
    #[error("invalid config `{key}`: {detail}")]
    InvalidConfig { key: String, detail: String },

    /// A non-finite value appeared where finiteness is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Checkpoint file is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset file or manifest problem; names the offending sample when known.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A statistical routine was asked for a degenerate comparison.
    #[error("degenerate comparison: {0}")]
    Degenerate(String),

    /// Generic evaluation failure (graph misuse, missing binding, bad cell index).
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image encode error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            detail: detail.into(),
        }
    }

    /// True for errors that indicate bad user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. } | Error::ShapeMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
