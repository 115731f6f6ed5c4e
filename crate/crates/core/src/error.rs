use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("op #{op_id} ({op}): incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op_id: usize,
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} values, got {actual}")]
    BadShape {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("node {0} has not been recorded on this tape")]
    UnknownNode(usize),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no gradient for node {0}; run backward first")]
    NoGradient(usize),

    #[error("row index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("non-finite gradient in parameter tensor {tensor} at position {position}")]
    NonFiniteGradient { tensor: usize, position: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("context has dimension {actual}, expected {expected}")]
    ContextDim { expected: usize, actual: usize },

    #[error("treatment index {index} out of range 1..={n}")]
    TreatmentOutOfRange { index: usize, n: usize },

    #[error("empty sample cloud")]
    EmptyCloud,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("treatment T_{treatment} has no samples; positivity is violated")]
    Positivity { treatment: usize },

    #[error("non-finite {term} at sample {sample:?}")]
    NonFiniteLoss { term: &'static str, sample: Option<usize> },

    #[error("training diverged at epoch {epoch} ({term}); last good epoch {last_good:?}")]
    Diverged {
        epoch: usize,
        term: &'static str,
        last_good: Option<usize>,
    },

    #[error("PEHE requires ground truth, but the dataset carries none")]
    MissingGroundTruth,

    #[error("undefined leverage rate: s and t are both {0}")]
    UndefinedLeverage(u32),

    #[error("no click history with two distinct days for ad {0}")]
    MissingHistory(u32),

    #[error("kappa bracket [{kappa_min}, {kappa_max}] gives costs [{cost_min}, {cost_max}], target {target}")]
    Bracket {
        kappa_min: f64,
        kappa_max: f64,
        cost_min: f64,
        cost_max: f64,
        target: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: unsupported format {found} (expected {expected})")]
    Format {
        path: PathBuf,
        expected: String,
        found: String,
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
