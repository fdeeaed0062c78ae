use std::path::PathBuf;

use kd_autograd::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} out of range for vocabulary of {vocab_size}{context}")]
    Vocabulary {
        id: u32,
        vocab_size: usize,
        context: String,
    },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value {value} in loss term {term} at step {step}")]
    NonFiniteLoss {
        term: &'static str,
        value: f64,
        step: usize,
    },
    #[error("invalid task spec: {0}")]
    TaskSpec(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("bad container: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
