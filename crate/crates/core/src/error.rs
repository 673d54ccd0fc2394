use std::io;

use thiserror::Error;

use crate::data::DataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenRange { id: usize, size: usize },
    #[error("sequence length {len} outside [1, {max}]")]
    Length { len: usize, max: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error("{0} requires a flexible-attention model")]
    UnsupportedMode(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
