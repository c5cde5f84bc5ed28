use std::path::PathBuf;

use crate::denoiser::protocol::ProtocolError;

pub type Result<T, E = SsdError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum SsdError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("timestep {t} out of range ({reason})")]
    Timestep { t: usize, reason: &'static str },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("denoiser failure: {0}")]
    Denoiser(String),
    #[error("denoiser request timed out after {0} ms")]
    Timeout(u64),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SsdError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SsdError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SsdError::Io {
            path: path.into(),
            source,
        }
    }
}
