use thiserror::Error;

use crate::audio::AudioError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("input dimension mismatch: expected {expected} frames, found {found}")]
    FrameMismatch { expected: usize, found: usize },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("chain stopped after {completed} completed step(s)")]
    ChainFailed { completed: usize, source: Box<Error> },
    #[error("training diverged at iteration {iter}: loss is {loss}")]
    Diverged { iter: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
