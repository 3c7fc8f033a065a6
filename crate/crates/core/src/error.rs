use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model/operator/config geometry. The message names the offending extents.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. running backward on an empty tape.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("refusing to materialize {rows}x{cols} matrix (bound {bound} rows)")]
    TooLarge { rows: usize, cols: usize, bound: usize },

    /// Malformed dataset or checkpoint bytes.
    #[error("parse error in {source_name} at byte {offset}: {message}")]
    Parse {
        source_name: String,
        offset: usize,
        message: String,
    },

    #[error("{0}")]
    Numerical(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn parse(source_name: impl Into<String>, offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            offset,
            message: message.into(),
        }
    }
}
