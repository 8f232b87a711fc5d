use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("{op}: shape mismatch {shapes}")]
    Shape { op: &'static str, shapes: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Corpus, vocabulary or checkpoint content could not be ingested.
    #[error("{path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: impl Into<String>) -> Self {
        Error::Shape { op, shapes: shapes.into() }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Ingest { path: path.into(), message: message.into() }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}
