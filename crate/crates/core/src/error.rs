use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    /// A data file is malformed. `row` is 1-based and counts the header line.
    #[error("{file}:{row}: {msg}")]
    Format { file: String, row: usize, msg: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("encoder parameters already frozen")]
    AlreadyFrozen,

    #[error("encoder parameters must be frozen before encoding")]
    NotFrozen,

    #[error("no edges")]
    NoEdges,

    #[error("class {0} without labeled support")]
    EmptyClass(usize),

    #[error("contrastive loss needs >=2 classes")]
    TooFewClasses,

    #[error("empty sample set for {0}")]
    EmptySample(&'static str),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("parameter {0} not in catalog")]
    NotInCatalog(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("objective diverged at epoch {epoch} (last finite epoch: {last_finite})")]
    Diverged { epoch: usize, last_finite: usize },

    #[error("unknown ablation toggle {0:?}")]
    UnknownToggle(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(file: impl Into<String>, row: usize, msg: impl Into<String>) -> Self {
        Error::Format { file: file.into(), row, msg: msg.into() }
    }
}
