use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad resolution, empty manifest, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A function was called with arguments outside its domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A structured-text record could not be parsed.
    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    /// A binary file does not follow its declared layout.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("could not place mask: {0}")]
    Placement(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Operation called in the wrong state (e.g. backward without a forward pass).
    #[error("state error: {0}")]
    State(String),

    /// NaN or infinity encountered during training or sampling.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
