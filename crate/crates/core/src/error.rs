use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("attention row {row} is fully masked")]
    FullyMasked { row: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("nonzero noise passed to the final denoising step")]
    FinalStepNoise,

    #[error("model is already inflated")]
    AlreadyInflated,

    #[error("operation requires an inflated video model")]
    NotInflated,

    #[error("{0}")]
    ModeMismatch(String),

    #[error("missing condition: {0}")]
    MissingCondition(String),

    #[error("empty cross-attention context")]
    EmptyContext,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Checkpoint(#[from] crate::trainer::checkpoint::CheckpointError),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
