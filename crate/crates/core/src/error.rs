use std::path::PathBuf;

use thiserror::Error;

use crate::denoiser::AttnKey;

/// Errors produced by the editing engine. Each variant maps onto one error
/// class of the command line tool.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep ordering violated: {0}")]
    Ordering(String),

    #[error("non-finite values: {0}")]
    Numeric(String),

    #[error("out-of-vocabulary word `{0}`")]
    Vocabulary(String),

    #[error("attention hook rejected replacement at {key}: {reason}")]
    Hook { key: AttnKey, reason: String },

    #[error("alignment inconsistent with attention map: {0}")]
    Alignment(String),

    #[error("attention store has no map for {0}")]
    StoreMiss(AttnKey),

    #[error("invalid state: {0}")]
    State(String),

    #[error("inversion diverged at step {step}: {reason}")]
    Inversion { step: usize, reason: String },

    #[error("{path}: {reason}")]
    Path { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn path(path: impl Into<PathBuf>, reason: impl std::fmt::Display) -> Self {
        Error::Path {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
