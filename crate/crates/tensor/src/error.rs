use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    /// Incompatible or invalid shapes. The message carries the offending shapes.
    #[error("dimension error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// An op produced NaN or infinity.
    #[error("non-finite value produced by {op}: {detail}")]
    NonFinite { op: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("backward error: {0}")]
    Backward(String),
}

impl TensorError {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub fn non_finite(op: impl Into<String>, detail: impl Into<String>) -> Self {
        TensorError::NonFinite {
            op: op.into(),
            detail: detail.into(),
        }
    }
}
