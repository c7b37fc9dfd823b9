use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty codebook")]
    EmptyCodebook,

    #[error("invalid model input: {0}")]
    Invalid(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Core(#[from] duet_core::CoreError),

    #[error(transparent)]
    Motion(#[from] duet_motion::MotionError),

    #[error(transparent)]
    Music(#[from] duet_music::MusicError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
