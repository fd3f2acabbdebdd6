use std::path::PathBuf;

use tmf_autodiff::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TmfError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, TmfError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TmfError {
    let path = path.into();
    move |source| TmfError::Io { path, source }
}
