use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sample size exceeds cloud size ({requested} > {available})")]
    SampleSizeExceedsCloud { requested: usize, available: usize },

    #[error("insufficient neighbors for plane fit (k = {0}, need at least 3)")]
    InsufficientNeighbors(usize),

    #[error("chamfer undefined for empty set")]
    EmptyChamferSet,

    #[error("empty deformation region")]
    EmptyRegion,

    #[error("degenerate sampling: no point selected after {0} attempts")]
    DegenerateSampling(usize),

    #[error("{what}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("numerical overflow in {0}")]
    NumericalOverflow(&'static str),

    #[error("insufficient samples for covariance (class {class} has {count})")]
    InsufficientSamples { class: usize, count: usize },

    #[error("class {0} is not covered by the model")]
    UnknownClass(usize),

    #[error("empty cloud")]
    EmptyCloud,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed binary data: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}, step {step} ({phase}): {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        phase: &'static str,
        detail: String,
    },

    #[error("output directory is locked by another run: {0}")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad numbers rather than bad inputs or files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalOverflow(_) | Error::Diverged { .. } | Error::DegenerateSampling(_)
        )
    }
}
