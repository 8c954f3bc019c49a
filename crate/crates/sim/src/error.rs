use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("episode is terminal after {0} steps")]
    Terminal(usize),
    #[error("expert reached an impossible phase: {0}")]
    ImpossiblePhase(String),
    #[error("malformed episode file: {0}")]
    Format(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
