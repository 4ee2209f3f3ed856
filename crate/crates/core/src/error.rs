use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("inconsistent state: {0}")]
    Consistency(String),

    #[error("kappa is undefined: {0}")]
    UndefinedKappa(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape { op, left: left.to_vec(), right: right.to_vec() }
    }
}
