use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("input shape {got:?} does not match the expected {expected:?}")]
    Shape { got: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint is incompatible with the requested network: {0}")]
    Incompatible(String),
    #[error("stratum `{0}` is empty")]
    EmptyStratum(&'static str),
    #[error("non-finite loss at step {step} (batch: {embryos})")]
    NonFiniteLoss { step: usize, embryos: String },
    #[error("step {step} outside [0, {total})")]
    StepOutOfRange { step: usize, total: usize },
    #[error(transparent)]
    Core(#[from] embryo_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> NetError {
    let path = path.into();
    move |source| NetError::Io { path, source }
}
