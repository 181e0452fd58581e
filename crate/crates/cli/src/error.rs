use std::path::PathBuf;

use thiserror::Error;

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const PARTIAL_FAILURE: i32 = 2;
    pub const IO: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("no completed cells under {0}")]
    NoData(PathBuf),
    #[error(transparent)]
    Core(#[from] selfcond_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use selfcond_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::NoData(_) => exit::USAGE,
            CliError::Io { .. } | CliError::Json { .. } => exit::IO,
            CliError::Core(E::Io(_) | E::Serde(_)) => exit::IO,
            CliError::Core(E::Contract(_)) => exit::USAGE,
            CliError::Core(_) => exit::PARTIAL_FAILURE,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Json { path, source }
    }
}

pub type CliResult<T> = Result<T, CliError>;
