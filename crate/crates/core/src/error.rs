use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),

    #[error("variable {0} is not differentiable (constant leaf or derived only from constants)")]
    NotDifferentiable(usize),

    #[error("joint count mismatch: got {got}, skeleton {skeleton} expects {expected}")]
    JointCount {
        got: usize,
        expected: usize,
        skeleton: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed pose set: {0}")]
    MalformedPoseSet(String),

    #[error("procrustes alignment failed: {0}")]
    DegenerateAlignment(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
