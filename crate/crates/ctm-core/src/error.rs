use std::io;
use thiserror::Error;

/// Error type shared across the whole crate.
///
/// The variants mirror the failure classes the public operations promise:
/// shape disagreements, numeric degeneracies, violated call contracts,
/// invalid configuration, and malformed external files.
#[derive(Debug, Error)]
pub enum CtmError {
    /// Tensor shapes disagree for the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Non-finite values appeared, or a numerically degenerate input
    /// (e.g. a zero-norm vector fed to cosine) was detected.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The caller violated an API precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A configuration value is out of range or unknown.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset file could not be parsed.
    #[error("parse error in {file}: {detail}")]
    Parse { file: String, detail: String },

    /// A checkpoint or embedding file is malformed.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CtmError>;

impl CtmError {
    pub fn dim(msg: impl Into<String>) -> Self {
        CtmError::Dim(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        CtmError::Numeric(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        CtmError::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CtmError::Config(msg.into())
    }
    pub fn parse(file: impl Into<String>, detail: impl Into<String>) -> Self {
        CtmError::Parse {
            file: file.into(),
            detail: detail.into(),
        }
    }
    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        CtmError::Format {
            offset,
            detail: detail.into(),
        }
    }
}
