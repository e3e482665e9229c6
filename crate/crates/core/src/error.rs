use std::path::PathBuf;

use crate::detector::StepDiagnostics;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid variance {0}: variances must be strictly positive")]
    InvalidVariance(f64),

    #[error("malformed corner set: reconstruction deviates by {0:.3e} m")]
    MalformedCorners(f64),

    #[error("could not place {requested} non-overlapping objects ({placed} placed after {attempts} attempts)")]
    PlacementFailure {
        requested: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("non-finite loss at iteration {}: {}", .0.iteration, .0.message)]
    NonFiniteLoss(Box<StepDiagnostics>),

    #[error("average precision is undefined without ground truths")]
    UndefinedAp,

    #[error("insufficient data: {found} matched pairs, need at least {required}")]
    InsufficientData { found: usize, required: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
