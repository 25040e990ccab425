use std::io;
use std::path::{Path, PathBuf};

/// Errors of the file-facing layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] fmbff_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// Malformed file content; `offset` is the byte position of the fault.
    #[error("{path}: format error at byte {offset}: {detail}")]
    Format { path: String, offset: usize, detail: String },
    /// Files that parse but disagree with each other.
    #[error("validation error: {0}")]
    Validation(String),
    /// A gradient or consistency check failed.
    #[error("verification failed: {0}")]
    Verification(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, offset: usize, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }

    /// Process exit status: 2 configuration, 3 I/O or format, 4
    /// verification, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(fmbff_core::Error::Config { .. }) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Validation(_) => 3,
            Error::Verification(_) => 4,
            Error::Core(_) => 1,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
