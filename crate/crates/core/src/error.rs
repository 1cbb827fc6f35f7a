use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("instance `{id}`: {reason}")]
    InvalidInstance { id: String, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what}: expected {expected}, found {found}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("symmetric eigensolver did not converge within {max_iterations} iterations")]
    EigenNotConverged { max_iterations: usize },

    #[error("propagation needs at least one labeled cluster")]
    NoLabeledClusters,

    #[error("unknown instance `{0}`")]
    UnknownInstance(String),

    #[error("unknown cluster {0}")]
    UnknownCluster(usize),

    #[error("relevance accuracy is undefined for an empty ground-truth set")]
    EmptyGroundTruth,

    #[error("no anomaly instances with ground truth in the evaluated split")]
    NoQualifyingInstances,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn instance(id: &str, reason: impl Into<String>) -> Self {
        Error::InvalidInstance {
            id: id.to_string(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad caller input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::NonFiniteLoss { .. } | Error::EigenNotConverged { .. }
        )
    }
}
