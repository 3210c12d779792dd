use std::path::PathBuf;

use ctm_core::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("image decode: {0}")]
    Decode(String),

    #[error("episode capacity: {0}")]
    Capacity(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("non-finite loss at episode {episode} (lr {lr}){detail}")]
    NonFinite { episode: u64, lr: f64, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
