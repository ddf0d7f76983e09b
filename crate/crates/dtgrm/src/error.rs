//! Error type shared by the fallible surfaces (I/O, config, training).
//!
//! Shape and domain violations inside the numeric kernels panic with a
//! descriptive message instead; they indicate programming errors, not
//! recoverable conditions.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, sequence {sequence}")]
    NonFiniteLoss { epoch: usize, sequence: String },
}

pub type Result<T> = std::result::Result<T, Error>;
