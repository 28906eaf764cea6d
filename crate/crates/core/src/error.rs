use std::path::PathBuf;

/// Errors produced by the DiffRoll library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("MIDI error: {0}")]
    Midi(String),
    #[error("audio error: {0}")]
    Audio(String),
    #[error("unrecognized dataset layout: {0}")]
    Layout(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
