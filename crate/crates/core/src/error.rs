use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate cluster {cluster}: frequency {frequency}")]
    DegenerateCluster { cluster: usize, frequency: f64 },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint mismatch at {layer}: {detail}")]
    Checkpoint { layer: String, detail: String },

    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite { term: String, iteration: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures of the numerics during a run rather than bad input:
    /// non-finite values, log of a non-positive value, collapsed clusters.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Domain { .. } | Error::DegenerateCluster { .. })
    }
}
