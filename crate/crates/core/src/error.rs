use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::TensorError;
use crate::text::TextError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("config error: {0}")]
    Config(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: u64, loss: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing soft label for pair {pair_id} position {position}")]
    MissingSoftLabel { pair_id: u32, position: usize },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration and integrity failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Integrity(_) => 2,
            Error::Model(ModelError::ConfigMismatch(_) | ModelError::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
