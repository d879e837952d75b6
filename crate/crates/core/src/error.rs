use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("world generation failed: {0}")]
    Generation(String),
    #[error("shift would disconnect the graph after {attempts} attempts")]
    Disconnected { attempts: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("episode has no steps")]
    EmptyEpisode,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("feedback error: {0}")]
    Feedback(String),
}

pub type Result<T> = std::result::Result<T, Error>;
