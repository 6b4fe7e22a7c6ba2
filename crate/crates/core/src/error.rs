use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("ensemble needs at least {required} members, got {actual}")]
    TooFewMembers { required: usize, actual: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("ill-conditioned innovation covariance: {0}")]
    IllConditioned(String),

    #[error("degenerate observation ensemble: every singular value is below the truncation threshold")]
    DegenerateObservationEnsemble,

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("duplicate state variable `{0}`")]
    DuplicateName(String),

    #[error("unknown state variable `{0}`")]
    UnknownVariable(String),

    #[error("invalid state layout: {0}")]
    Layout(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("model step failed: {0}")]
    Model(String),

    #[error("CFL condition violated: courant number {courant:.4} > 1")]
    Cfl { courant: f64 },

    #[error("member {member} failed: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("cycle {cycle} failed: {source}")]
    Cycle {
        cycle: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parameter rows of member {0} were modified during the forecast step")]
    ParameterMutated(usize),

    #[error("observation time {time} lies outside the trajectory span [{start}, {end}]")]
    TimeOutOfSpan { time: f64, start: f64, end: f64 },

    #[error("dataset `{0}` not found")]
    DatasetNotFound(String),

    #[error("dataset `{0}` already exists")]
    DatasetExists(String),

    #[error("`{0}` already holds an ensemble store")]
    StoreExists(String),

    #[error("dataset `{0}` is finalized and cannot be written")]
    DatasetFinalized(String),

    #[error("hyperslab rows {rows:?} cols {cols:?} exceed dataset `{dataset}` shape {shape:?}")]
    HyperslabOutOfBounds {
        dataset: String,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
        shape: (usize, usize),
    },

    #[error("overlapping concurrent write to dataset `{0}`")]
    OverlappingWrite(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub(crate) fn ensure_dims(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
