use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{} exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
    #[error("data: {0}")]
    Data(String),
    #[error("training: {0}")]
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Exists(_) => 2,
            CliError::Data(_) => 3,
            CliError::Training(_) => 4,
        }
    }
}

pub(crate) fn data<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

pub(crate) fn training<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Training(format!("{context}: {e}"))
}
