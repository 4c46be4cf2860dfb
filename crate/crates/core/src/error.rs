use std::path::PathBuf;

use gst_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GstError {
    #[error(transparent)]
    Tensor(#[from] AutodiffError),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: duplicate record for frame {frame}, pedestrian {ped}")]
    DuplicateRecord {
        path: String,
        line: usize,
        frame: i64,
        ped: i64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("window has no valid loss terms")]
    DegenerateWindow,
    #[error("adjacency row {row} sums to {sum}, expected 1")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

pub type Result<T, E = GstError> = std::result::Result<T, E>;

impl GstError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GstError::Io {
            path: path.into(),
            source,
        }
    }
}
