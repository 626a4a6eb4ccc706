use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("payload size mismatch in {path}: header declares {expected} values, found {found}")]
    SizeMismatch { path: PathBuf, expected: usize, found: usize },
    #[error("unknown modality token `{0}`")]
    UnknownModality(String),
    #[error("condition index {0} outside 0..=3")]
    ConditionIndex(usize),
    #[error("malformed header {path}: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("invalid label id {0}")]
    Label(u8),
    #[error("invalid modality set: {0}")]
    Modalities(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("arm {arm}, missing {missing}: {source}")]
    Arm { arm: String, missing: String, source: Box<Error> },
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for a divergence, also when wrapped in an [`Error::Arm`].
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence { .. } => true,
            Error::Arm { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
