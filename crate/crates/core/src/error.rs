use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),

    #[error("malformed scan: {0}")]
    MalformedScan(String),

    #[error("label/scan length mismatch: expected {expected} labels, found {found}")]
    LabelLengthMismatch { expected: usize, found: usize },

    #[error("malformed label file: {0}")]
    MalformedLabels(String),

    #[error("malformed pose line {line}: {reason}")]
    MalformedPose { line: usize, reason: String },

    #[error("malformed super-class table line {line}: {reason}")]
    MalformedSuperClassTable { line: usize, reason: String },

    #[error("malformed tensor file: {0}")]
    MalformedTensorFile(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("weight shape mismatch: {0}")]
    WeightShapeMismatch(String),

    #[error("empty target")]
    EmptyTarget,

    #[error("non-finite features")]
    NonFiniteFeatures,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid correspondences: {0}")]
    InvalidCorrespondences(String),

    #[error("no keypoints")]
    NoKeypoints,

    #[error("descriptor database indices must be strictly increasing (got {got} after {last})")]
    NonIncreasingIndex { last: usize, got: usize },

    #[error("missing poses for scan indices {0:?}")]
    MissingPoses(Vec<usize>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid sequence directory {path}: {reason}")]
    Sequence { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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

    /// Whether the error stems from unusable user input (files, shapes) as
    /// opposed to a configuration problem.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
