use std::path::PathBuf;

use thiserror::Error;

use crate::micromodel::Model;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint error in `{field}`: {message}")]
    Checkpoint { field: String, message: String },

    #[error("training diverged at epoch {epoch}, step {step} (loss {loss})")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        last_good: Box<Model>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        LabError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Checkpoint {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
