use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported graft mode for {op}: {mode}")]
    UnsupportedMode { op: &'static str, mode: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("corrupt file {}: expected {expected} bytes, found {actual}", path.display())]
    CorruptFile {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint config digest mismatch (file {found}, model {expected})")]
    DigestMismatch { expected: String, found: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
