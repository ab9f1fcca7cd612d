use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape mismatch at node `{node}`: expected {expected:?}, got {actual:?}")]
    NodeShape {
        node: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {what} at byte offset {offset}: {reason}")]
    Decode {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("architecture mismatch: checkpoint has `{found}`, expected `{expected}`")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("invalid config at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("{module}: {reason}")]
    Runtime {
        module: &'static str,
        reason: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
