use std::path::PathBuf;

use cardiocap_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    Shape { what: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("schema error in record {index}: {msg}")]
    Schema { index: usize, msg: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("batching error: {0}")]
    Batching(String),
    #[error("corrupt token sequence: {0}")]
    Corruption(String),
    #[error("sequence of length {len} exceeds positional capacity {max}")]
    Capacity { len: usize, max: usize },
    #[error("training diverged: {0}")]
    Numeric(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("translation provider failed after {attempts} attempts: {msg}")]
    Transport { attempts: usize, msg: String },
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl std::fmt::Display) -> Self {
        Error::Format { path: path.into(), msg: msg.to_string() }
    }

    /// True for failures caused by non-finite values during training.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Tensor(TensorError::NonFinite { .. }))
    }
}
