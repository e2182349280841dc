use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-sequential time step: expected t = {expected}, got t = {got}")]
    NonSequentialStep { expected: usize, got: usize },

    #[error("the first action of an episode must be an update")]
    InitialActionNotUpdate,

    #[error("step called on a finished episode")]
    EpisodeFinished,

    #[error("step called before reset")]
    NotReset,

    #[error("forward cache is stale: network changed since the forward pass")]
    StaleCache,

    #[error("rollout buffer has not been finalized")]
    NotFinalized,

    #[error("rollout buffer was already finalized")]
    AlreadyFinalized,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
