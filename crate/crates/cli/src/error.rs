use thiserror::Error;

use gentron::trainer::CheckpointError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Model(#[from] gentron::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::CheckFailed(_) => 1,
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Model(e) => match e {
                gentron::Error::Checkpoint(_) => 3,
                gentron::Error::ModeMismatch(_) | gentron::Error::NotInflated | gentron::Error::AlreadyInflated => 3,
                _ => 2,
            },
            Self::Io(_) | Self::Schema(_) | Self::Checkpoint(_) => 3,
        }
    }
}
