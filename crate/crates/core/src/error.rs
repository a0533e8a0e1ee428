use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("checkpoint digest mismatch")]
    Digest,

    #[error("unsupported format version {0}")]
    Version(u8),

    #[error("structural config mismatch on `{field}`: checkpoint has {expected}, requested {found}")]
    ConfigMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} on sample {sample}")]
    Diverged { step: usize, sample: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
