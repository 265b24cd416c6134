use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("softmax slice {slice} is fully masked")]
    DegenerateSlice { slice: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("malformed skeleton: {0}")]
    Skeleton(String),

    #[error("missing visual features for {0}")]
    MissingVisual(String),

    #[error("index {index} out of range 0..{len} for {what}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("timeline is not canonical: {0}")]
    NonCanonical(String),

    #[error("instance too large for exhaustive matching: {pred} predicted and {gt} ground-truth segments (limit {limit})")]
    TooLarge {
        pred: usize,
        gt: usize,
        limit: usize,
    },

    #[error("infeasible scenario: {0}")]
    Infeasible(String),

    #[error("too few subjects: need {need}, have {have}")]
    TooFewSubjects { need: usize, have: usize },

    #[error("{path}: line {line}: {field}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("{0}")]
    Config(String),

    #[error("checkpoint does not match the configured architecture: {0}")]
    CheckpointMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable code for the error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::InvalidArgument(_) => "E_ARGUMENT",
            Error::DegenerateSlice { .. } => "E_DEGENERATE",
            Error::NonScalarLoss(_) => "E_NONSCALAR",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::EmptyInput(_) => "E_EMPTY",
            Error::InvalidScene(_) => "E_SCENE",
            Error::Skeleton(_) => "E_SKELETON",
            Error::MissingVisual(_) => "E_VISUAL",
            Error::OutOfRange { .. } => "E_RANGE",
            Error::NonCanonical(_) => "E_TIMELINE",
            Error::TooLarge { .. } => "E_TOO_LARGE",
            Error::Infeasible(_) => "E_INFEASIBLE",
            Error::TooFewSubjects { .. } => "E_SUBJECTS",
            Error::Parse { .. } => "E_PARSE",
            Error::Config(_) => "E_CONFIG",
            Error::CheckpointMismatch(_) => "E_CHECKPOINT",
            Error::Io { .. } => "E_IO",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
