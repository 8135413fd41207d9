use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error in group `{group}`: {detail}")]
    Numeric { group: String, detail: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (group `{group}`)")]
    Diverged {
        epoch: usize,
        batch: usize,
        group: String,
    },
    #[error("snapshot error: {0}")]
    Snapshot(String),
    #[error("refused: {0}")]
    Refusal(String),
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}
