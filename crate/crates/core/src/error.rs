use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LtriError>;

#[derive(Debug, Error)]
pub enum LtriError {
    /// Malformed trace data: non-finite values, broken causality, position gaps.
    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    /// Operation not valid in the engine's current phase.
    #[error("state error: {0}")]
    State(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LtriError {
    pub(crate) fn trace(msg: impl Into<String>) -> Self {
        LtriError::InvalidTrace(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LtriError::Config(msg.into())
    }

    pub(crate) fn index(msg: impl Into<String>) -> Self {
        LtriError::Index(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        LtriError::State(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        LtriError::Internal(msg.into())
    }
}
