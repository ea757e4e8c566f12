use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid TOML: {message}")]
    Toml { path: PathBuf, message: String },
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"))]
    Schema(Vec<String>),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("cannot serialize {path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("thread pool: {0}")]
    Threads(String),
    #[error("{context}: {message}")]
    Compute { context: &'static str, message: String },
}

impl CliError {
    pub fn compute(context: &'static str, e: impl std::fmt::Display) -> Self {
        CliError::Compute {
            context,
            message: e.to_string(),
        }
    }
}
