use std::path::PathBuf;

use convqg_grad::GradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("unknown dataset format `{0}` (expected kvqg, vqa, vqgcoco or fvqa)")]
    UnknownFormat(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Input(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn record(line: usize, message: impl Into<String>) -> Self {
        Error::Record { line, message: message.into() }
    }

    /// Short stable tag for machine-readable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Grad(_) => "numeric",
            Error::Io { .. } => "io",
            Error::Record { .. } => "record",
            Error::UnknownFormat(_) => "format",
            Error::UnknownRelation(_) => "relation",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Input(_) => "input",
        }
    }
}
