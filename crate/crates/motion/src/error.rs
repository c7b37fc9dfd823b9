use thiserror::Error;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("frame count mismatch: {0} vs {1}")]
    FrameMismatch(usize, usize),

    #[error("invalid motion data: {0}")]
    Invalid(String),

    #[error("infeasible contact episode schedule: {0}")]
    InfeasibleEpisodes(String),

    #[error("parse error in {file} line {line}: {detail}")]
    Parse {
        file: String,
        line: usize,
        detail: String,
    },

    #[error("import mapping incomplete: missing internal joints {0:?}")]
    MappingIncomplete(Vec<String>),

    #[error(transparent)]
    Core(#[from] duet_core::CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MotionError>;
