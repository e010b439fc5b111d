use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate class id {0}")]
    DuplicateClass(u32),
    #[error("unknown class id {0}")]
    UnknownClass(u32),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing checkpoint for stage {stage} in {dir}")]
    MissingCheckpoint { stage: usize, dir: PathBuf },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("training aborted at stage {stage}, iteration {iteration}: {reason}")]
    Aborted { stage: usize, iteration: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
