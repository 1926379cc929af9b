use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model evaluation produced a non-finite value: {0}")]
    ModelEvaluation(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("grid oracle budget exceeded: {levels}^{horizon} sequences > {budget}")]
    Budget {
        levels: usize,
        horizon: usize,
        budget: u64,
    },

    #[error("dataset window mismatch: {0} vs {1}")]
    WindowMismatch(usize, usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite training loss at epoch {epoch} (lr {learning_rate}): {detail}")]
    NonFiniteLoss {
        epoch: usize,
        learning_rate: f64,
        detail: String,
    },

    #[error("episode {episode}")]
    Episode {
        episode: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("dagger iteration {iteration}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_episode(self, episode: u64) -> Self {
        Error::Episode {
            episode,
            source: Box::new(self),
        }
    }
}
