use thiserror::Error;

/// Error type shared across the pipeline.
#[derive(Debug, Error)]
pub enum FlowError {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric health: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl FlowError {
    pub fn validation(msg: impl Into<String>) -> Self {
        FlowError::Validation(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        FlowError::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        FlowError::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, FlowError>;
