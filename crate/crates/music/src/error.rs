use thiserror::Error;

#[derive(Debug, Error)]
pub enum MusicError {
    #[error("invalid audio input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] duet_core::CoreError),
}

pub type Result<T> = std::result::Result<T, MusicError>;
