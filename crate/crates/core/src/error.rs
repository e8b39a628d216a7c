//! Error types shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StaError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("gradient for parameter `{param}` contains NaN; step rejected")]
    NanGradient { param: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),
}

impl StaError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        StaError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        StaError::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        StaError::NonFinite {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, StaError>;
