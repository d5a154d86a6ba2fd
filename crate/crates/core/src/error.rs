use std::path::PathBuf;

use thiserror::Error;

/// Every failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset not found: {}", .0.display())]
    DatasetNotFound(PathBuf),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown label {0:?}")]
    LabelScheme(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: String, message: String },

    #[error("token id {id} outside vocabulary of size {size}")]
    Vocabulary { id: u32, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot load weights from {}: {detail}", path.display())]
    WeightLoad { path: PathBuf, detail: String },

    #[error("corrupt artifact {}: {detail}", path.display())]
    Corruption { path: PathBuf, detail: String },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("training diverged in {stage} at step {step} (loss = {loss})")]
    Diverged {
        stage: String,
        step: usize,
        loss: f64,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
