use thiserror::Error;

/// Errors produced by the kriging engine.
#[derive(Debug, Error)]
pub enum SatcnError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error at line {line}, column {column}: {message}")]
    Data {
        line: u64,
        column: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SatcnError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SatcnError::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        SatcnError::Shape(msg.into())
    }

    /// Process exit code for the CLI: 1 usage/config, 2 numerical, 3 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            SatcnError::Config(_) => 1,
            SatcnError::Numerical(_) => 2,
            SatcnError::InvalidInput(_)
            | SatcnError::Shape(_)
            | SatcnError::Data { .. }
            | SatcnError::ModelFormat(_)
            | SatcnError::Io(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, SatcnError>;
