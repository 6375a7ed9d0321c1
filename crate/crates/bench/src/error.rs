use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] laau_core::Error),
    #[error("episode {id}: {source}")]
    Episode { id: String, source: laau_core::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("trace line {line}: {msg}")]
    Trace { line: u64, msg: String },
    #[error("trace length mismatch: {0}")]
    TraceLength(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{count} feasibility violation(s), first in episode {first}")]
    Violation { count: usize, first: String },
}

impl BenchError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn episode(id: &str, source: laau_core::Error) -> Self {
        Self::Episode { id: id.to_string(), source }
    }
}
