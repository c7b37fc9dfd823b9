use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Shape error naming the graph node that rejected its inputs.
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("graph input '{0}' was not fed")]
    MissingInput(String),

    #[error("unknown parameter '{0}'")]
    MissingParam(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
