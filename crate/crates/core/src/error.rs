use std::path::{Path, PathBuf};

use brainmt_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, BrainError>;

#[derive(Debug, Error)]
pub enum BrainError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("dimension error: {0}")]
    Shape(String),

    #[error("{path}: bad magic, not a {expected} file")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: dimension mismatch: {msg}")]
    DimMismatch { path: PathBuf, msg: String },

    #[error("{path}: parse error: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numeric error: {0}")]
    Numeric(String),
}

impl BrainError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        BrainError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        BrainError::Parse {
            path: path.as_ref().to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 1 usage/config, 2 data/shape/io, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            BrainError::Config(_) | BrainError::Usage(_) => 1,
            BrainError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

impl From<TensorError> for BrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Shape { .. } => BrainError::Shape(e.to_string()),
            TensorError::NonFinite { .. } | TensorError::Backward(_) => {
                BrainError::Numeric(e.to_string())
            }
            TensorError::Config(msg) => BrainError::Config(msg),
        }
    }
}
