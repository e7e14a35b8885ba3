use thiserror::Error;

use crate::tensor::TensorError;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// `Usage` -> 2, `Data` -> 3, `Numeric` -> 4, everything else -> 1.
#[derive(Debug, Error)]
pub enum AmsnError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("data: {0}")]
    Data(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AmsnError>;

impl AmsnError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            AmsnError::Usage(_) => 2,
            AmsnError::Data(_) | AmsnError::Manifest(_) => 3,
            AmsnError::Numeric(_) => 4,
            AmsnError::Eval(_) | AmsnError::Tensor(_) | AmsnError::Io(_) => 1,
        }
    }
}
