use thiserror::Error;

#[derive(Debug, Error)]
pub enum FluidError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {format} data: {reason}")]
    Parse { format: &'static str, reason: String },

    #[error("NaN gradient for parameter {index} ({name})")]
    NanGradient { index: usize, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = FluidError> = std::result::Result<T, E>;

impl FluidError {
    pub(crate) fn parse(format: &'static str, reason: impl Into<String>) -> Self {
        FluidError::Parse { format, reason: reason.into() }
    }
}
