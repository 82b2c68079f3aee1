//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KklError {
    #[error("non-finite state encountered at t = {time}")]
    NonFinite { time: f64 },

    #[error("query time {t} outside stored span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("finite-difference stencil left the finite-value domain at t = {time}")]
    StencilOutOfDomain { time: f64 },

    #[error("no point pair satisfies the separation floor {min_sep}")]
    Degenerate { min_sep: f64 },

    #[error("sign error: {0}")]
    SignError(String),

    #[error("filter gains must be pairwise distinct (duplicate {0})")]
    DuplicateLambda(f64),

    #[error("no sign change of sigma(., {y}) found within distance {reach}")]
    BracketFailure { y: f64, reach: f64 },

    #[error("initial gap {gap:e} is below the underflow threshold")]
    GapUnderflow { gap: f64 },

    #[error("backward integration left the domain at t = {time}")]
    BackwardEscape { time: f64 },

    #[error("norm {norm:e} at lambda = {lambda} is below the integrator error floor")]
    NormUnderflow { lambda: f64, norm: f64 },

    #[error("noise amplitude is zero, gain undefined")]
    ZeroAmplitude,

    #[error("scenario reports disagree on the observer set")]
    MismatchedObservers,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

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

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, KklError>;

impl KklError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KklError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        KklError::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        KklError::Json {
            path: path.into(),
            source,
        }
    }
}
