use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine, pipeline, and file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A caller-supplied value is outside the operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A model or run configuration is inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data (token ids, sequence lengths) violates an engine precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A data file failed to parse; reported with file and line number.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// An I/O failure on a named path.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A numeric failure (NaN loss, divergence) that aborts a computation.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    /// An [`Error::Io`] tagged with the path it happened on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// An [`Error::Parse`] tagged with file and line number.
    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
