use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed header: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("{path}: bad dimensions: {reason}")]
    Dimension { path: PathBuf, reason: String },

    #[error("{path}: truncated payload: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: trailing bytes after payload: {extra}")]
    Trailing { path: PathBuf, extra: usize },

    #[error("{path}: expected {expected}, found {actual}")]
    Kind {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("{path}: already locked by another process")]
    Locked { path: PathBuf },

    #[error(transparent)]
    Core(#[from] icnet_core::Error),
}

pub type Result<T> = std::result::Result<T, IoError>;

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl IoError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        use icnet_core::Error as E;
        matches!(
            self,
            IoError::Core(E::Numeric(_) | E::NoConvergence { .. } | E::Unsatisfiable(_))
        )
    }
}
