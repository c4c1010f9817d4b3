use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::diffcore::TensorError;
use crate::embedstore::StoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("embedding dimension {got} does not match configured dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("degenerate fusion at batch row {row}: combined norm {norm:e} below 1e-8")]
    DegenerateFusion { row: usize, norm: f64 },
    #[error("{what}: row {row} has norm {norm}, expected unit norm")]
    NotUnitNorm { what: &'static str, row: usize, norm: f64 },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("record {index}: unknown {kind} id {id:?}")]
    UnresolvedId { index: usize, kind: &'static str, id: String },
    #[error("non-finite gradient for parameter {0:?}")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("query {index}: {source}")]
    Query {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
