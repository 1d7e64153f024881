use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("variance must be strictly positive (got {0})")]
    NonPositiveVariance(f64),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("no valid training tuples: {0}")]
    NoTuples(String),

    #[error("stale mining cache: cache epoch {cache_epoch}, current epoch {current_epoch}")]
    StaleCache { cache_epoch: usize, current_epoch: usize },

    #[error("duplicate sample id {0}")]
    DuplicateId(u64),

    #[error("requested top-{k} from an index of {n} entries")]
    TopKTooLarge { k: usize, n: usize },

    #[error("invalid metric input: {0}")]
    Metric(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
