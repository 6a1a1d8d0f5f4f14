use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FaeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FaeError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, sample {sample_id}")]
    NonFinite { epoch: usize, sample_id: String },

    #[error("unmatched hypotheses, missing references for: {}", .0.join(", "))]
    Unmatched(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FaeError {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        FaeError::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FaeError::Io {
            path: path.into(),
            source,
        }
    }
}
