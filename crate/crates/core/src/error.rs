use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("value outside domain in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value in {name}")]
    NonFinite { name: String },

    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NonScalarBackward { rows: usize, cols: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for failures caused by numerics (NaN/Inf) rather than input or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
