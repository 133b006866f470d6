use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] regat_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, line: usize) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, line, source }
    }

    /// 2 for bad input, 1 for failed checks and internal errors.
    pub fn exit_code(&self) -> i32 {
        use regat_core::Error as C;
        match self {
            Error::Validation(_) | Error::Json { .. } => 2,
            Error::Core(C::Validation(_) | C::Config(_) | C::Dimension { .. } | C::UnknownParam(_)) => 2,
            Error::Core(_) | Error::Io { .. } | Error::CheckFailed(_) | Error::Csv(_) => 1,
        }
    }
}
