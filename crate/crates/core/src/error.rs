use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing dataset file {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("failed to read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    /// True for failures caused by the input data rather than by settings or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::MissingFile { .. } | Error::Io { .. } | Error::Parse { .. } | Error::Inconsistent(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
