use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum HigrError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl HigrError {
    /// Process exit code for the CLI: 1 config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            HigrError::Config(_) | HigrError::Contract(_) => 1,
            HigrError::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HigrError>;
