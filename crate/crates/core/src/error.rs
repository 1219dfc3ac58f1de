use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or hyper-parameter.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied an argument that violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Dataset files are missing or malformed.
    #[error("data error in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    /// A loss or activation became NaN/Inf.
    #[error("numeric failure in {phase}: {detail}")]
    Numeric { phase: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
