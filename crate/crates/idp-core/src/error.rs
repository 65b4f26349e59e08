//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IdpError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("dataset exhausted by filtering (min_interactions = {k})")]
    DatasetExhausted { k: usize },

    #[error("domain tag {0:?} appears in more than one merged store")]
    DuplicateDomain(String),

    #[error("catalog too small: need {needed} candidate items, only {available} available")]
    InsufficientCatalog { needed: usize, available: usize },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("bad checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("tensor {name}: shape mismatch, expected {expected:?}, got {got:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("missing tensor {0:?} in checkpoint")]
    MissingTensor(String),

    #[error("missing vector for item {item}")]
    MissingVector { item: u32 },

    #[error("item index {index} out of range (catalog size {size})")]
    ItemOutOfRange { index: u32, size: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("approximate index queried before freeze()")]
    IndexNotFrozen,
}

pub type Result<T> = std::result::Result<T, IdpError>;

impl IdpError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IdpError::Io {
            path: path.into(),
            source,
        }
    }
}
