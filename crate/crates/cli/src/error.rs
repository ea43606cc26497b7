use std::path::PathBuf;

/// Failures of a command, split by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error: {0}")]
    Format(String),
    #[error("plot spec error: {0}")]
    PlotSpec(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    /// 1 for domain failures, 2 for configuration, IO and format problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Domain(_) => 1,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<persidskii::Error> for CliError {
    fn from(e: persidskii::Error) -> Self {
        match e {
            persidskii::Error::Config(m) => CliError::Config(m),
            other => CliError::Domain(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
