use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dangling reference: {0}")]
    Integrity(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("part has no points")]
    EmptyPart,

    #[error("part frame is not orthonormal")]
    DegenerateFrame,

    #[error("trajectory has no waypoints")]
    EmptyTrajectory,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("no candidates to mine from")]
    EmptyCandidates,

    #[error("similar set is empty")]
    EmptySimilarSet,

    #[error("dissimilar set is empty")]
    EmptyDissimilarSet,

    #[error("trajectory library is empty")]
    EmptyLibrary,

    #[error("index was built from model {index}, but model is {model}")]
    FingerprintMismatch { index: String, model: String },

    #[error("scene has no points")]
    EmptyScene,

    #[error("training pool is empty")]
    EmptyTrainingPool,

    #[error("need at least {needed} tasks, dataset has {found}")]
    TooFewTasks { needed: usize, found: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownConfigKey(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("not found: {0}")]
    NotFound(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
