use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module. `code()` yields the short machine
/// code the CLI prints as `ERROR <code>: <msg>`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bad magic in {}", path.display())]
    BadMagic { path: PathBuf },

    #[error("bad tensor file {}: {reason}", path.display())]
    BadTensorFile { path: PathBuf, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("data mismatch: {0}")]
    DataMismatch(String),

    #[error("parse error in {}: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },

    #[error("no healthy frames in training data")]
    NoHealthyFrames,

    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "E_SHAPE",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::BadMagic { .. } => "E_MAGIC",
            Error::BadTensorFile { .. } => "E_TENSOR",
            Error::InvalidConfig(_) => "E_CONFIG",
            Error::InvalidInput(_) => "E_INPUT",
            Error::DataMismatch(_) => "E_DATA",
            Error::Parse { .. } => "E_PARSE",
            Error::NoHealthyFrames => "E_NOHEALTHY",
            Error::GradCheckFailed(_) => "E_GRADCHECK",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }
}
