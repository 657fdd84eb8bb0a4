use std::path::PathBuf;

/// Errors produced by the runtime, graph tooling and bundle IO.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("kv-cache capacity exceeded: need {needed} rows, capacity {capacity}")]
    Capacity { needed: usize, capacity: usize },
    #[error("invalid token id {id} (vocab size {vocab})")]
    InvalidToken { id: u32, vocab: usize },
    #[error("unknown task id '{0}'")]
    UnknownTask(String),
    #[error("adapter rank {got} does not match bank rank {expected}")]
    RankMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("missing calibration for {0}")]
    MissingCalibration(String),
    #[error("missing feed for graph input '{0}'")]
    MissingFeed(String),
    #[error("graph contains a cycle")]
    Cycle,
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("draft tree: {0}")]
    Draft(String),
    #[error("row budget exceeded: {rows} rows > budget {budget}")]
    RowBudget { rows: usize, budget: usize },
    #[error("bundle {path}: {msg}")]
    Bundle { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn bundle(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Bundle {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
