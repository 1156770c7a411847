use std::path::PathBuf;

use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AsdError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("refusing to overwrite existing {}; pass --force", .0.display())]
    Exists(PathBuf),
    #[error("unknown partition `{0}`")]
    UnknownPartition(String),
    #[error("nearest-neighbour store is empty")]
    EmptyStore,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl AsdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AsdError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            AsdError::Config(_) => 1,
            AsdError::Numeric(_) => 3,
            AsdError::Diff(DiffError::NonFiniteGradient(_) | DiffError::ZeroNorm(_)) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = AsdError> = std::result::Result<T, E>;
