use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("corrupt archive header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("truncated archive payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate embedding: row {row} has norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("missing weights: {}", .0.join(", "))]
    MissingWeights(Vec<String>),

    #[error("encoder mismatch: artifact expects {expected}, supplied {found}")]
    EncoderMismatch { expected: String, found: String },

    #[error("training diverged at {stage} {index}: loss = {loss}")]
    Divergence {
        stage: &'static str,
        index: usize,
        loss: f64,
    },

    #[error("not enough teachers in window {lo}..={hi}: need {needed}, have {available}")]
    InsufficientTeachers {
        lo: usize,
        hi: usize,
        needed: usize,
        available: usize,
    },

    #[error("insufficient patch pool: need {needed}, have {available}")]
    InsufficientPool { needed: usize, available: usize },

    #[error("arithmetic overflow: {0}")]
    Overflow(String),

    #[error("{0}")]
    State(String),

    #[error("json error: {0}")]
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

pub(crate) fn validate(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Validation(msg()))
    }
}
