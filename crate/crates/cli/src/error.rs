use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing or stale {artifact}: run `{stage}` first")]
    Dependency { stage: &'static str, artifact: PathBuf },

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: io::Error },

    #[error("{}: {source}", path.display())]
    Input { path: PathBuf, source: pathwise_core::Error },

    #[error(transparent)]
    Core(#[from] pathwise_core::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    /// 1 for bad invocations or configuration, 2 for everything that fails
    /// while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            _ => 2,
        }
    }
}
