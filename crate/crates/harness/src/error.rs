use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown config field `{0}`")]
    UnknownField(String),
    #[error("{0}: {1}")]
    Io(String, String),
    #[error(transparent)]
    Core(#[from] navadapt_core::Error),
    #[error("server error: {0}")]
    Server(String),
}
