//! Error type shared across the crate, with the exit-code mapping used by the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HigdaError {
    /// Invalid configuration: bad field value, unknown key, inconsistent settings.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset problems: missing files, undecodable images, insufficient samples.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape mismatch between operands.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A caller violated an operation precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Malformed graph structure (empty neighbor list, missing edges).
    #[error("graph error: {0}")]
    Graph(String),

    /// Non-finite values or diverging optimization.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The finite-difference oracle detected an unusable loss function.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// Checkpoint manifest or tensor payload does not match expectations.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl HigdaError {
    /// Process exit code for the CLI: 1 config, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HigdaError::Data(_) | HigdaError::Io(_) | HigdaError::Checkpoint(_) => 2,
            HigdaError::Numerical(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HigdaError>;
