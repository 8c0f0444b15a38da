use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a type invariant (empty clip, non-finite values, bad bin).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A parameter or option is outside its allowed range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor or sequence shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// Model or run configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A computed value went NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("checkpoint archive error: {0}")]
    Zip(#[from] zip::result::ZipError),

    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint does not match the model it is loaded into.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
