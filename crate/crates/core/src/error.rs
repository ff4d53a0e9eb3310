use std::path::PathBuf;

use crate::corpus::CorpusError;
use crate::numeric::NumericError;

/// Errors raised by the model, training and evaluation layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {length} outside 1..={max_len}")]
    InvalidLength { length: usize, max_len: usize },
    #[error("node {node} out of range for corpus of {nodes}")]
    NodeOutOfRange { node: usize, nodes: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite loss {detail}")]
    NonFiniteLoss { detail: String },
    #[error("class {class:?} has {have} labeled nodes, need at least {need}")]
    InsufficientClass { class: String, have: usize, need: usize },
    #[error("invalid prompt template: {0}")]
    Template(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures caused by numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::NonFiniteLoss { .. })
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
