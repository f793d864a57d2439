use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("missing gradient for managed parameter `{0}`")]
    MissingGrad(String),

    #[error("word `{0}` is not in the vocabulary")]
    UnknownWord(String),

    #[error("token id {id} is out of range for a vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown phase `{0}` (expected `training` or `regression`)")]
    Phase(String),

    #[error("simulator: {0}")]
    Sim(String),

    #[error("training: {0}")]
    Training(String),

    #[error("error regression: {0}")]
    Regression(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
