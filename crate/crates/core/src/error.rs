use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("manifest parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("blob format error at byte {offset}: {message}")]
    Blob { offset: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("validation error in node `{node}`: {message}")]
    Validation { node: String, message: String },

    #[error("unsupported node kind `{kind}` in node `{node}`")]
    UnsupportedNode { node: String, kind: String },

    #[error("tensor `{0}` not found in blob store")]
    MissingTensor(String),

    #[error("unknown layer `{0}`")]
    Lookup(String),

    #[error("invalid contrast target: {0}")]
    Target(String),

    #[error("task error: {0}")]
    Task(String),

    #[error("image format error: {0}")]
    Format(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn validation(node: &str, msg: impl Into<String>) -> Self {
        Error::Validation {
            node: node.to_string(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
