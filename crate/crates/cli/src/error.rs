use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),
    #[error("incomplete runs: {}", .0.join(", "))]
    IncompleteRuns(Vec<String>),
    #[error(transparent)]
    Core(#[from] dreamlab::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for configuration and usage problems, 1 for everything that went
    /// wrong while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| CliError::Json { path, source }
    }
}
