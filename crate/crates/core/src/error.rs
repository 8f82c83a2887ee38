use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("file not found: {0}")]
    NotFound(PathBuf),
    #[error("schema: {0}")]
    Schema(String),
    #[error("column `{0}` is missing from the CSV header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("column `{column}`: category `{value}` was not seen during fitting")]
    UnseenCategory { column: String, value: String },
    #[error("fold `{fold}`: row index {index} out of range for {n_rows} rows")]
    FoldRange {
        fold: String,
        index: usize,
        n_rows: usize,
    },
    #[error("fold `{fold}`: row {index} appears in both train and test")]
    FoldOverlap { fold: String, index: usize },
    #[error("split: {0}")]
    Split(String),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: usize, loss: f64 },
    #[error("classification targets must be 0 or 1, found {0}")]
    InvalidTarget(f64),
    #[error("AUC is undefined when only one class is present")]
    SingleClass,
    #[error("metric input is empty or mismatched ({predictions} predictions, {targets} targets)")]
    MetricInput { predictions: usize, targets: usize },
    #[error("group label {label} out of range for {tasks} task(s)")]
    UnknownGroup { label: usize, tasks: usize },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("index {index} out of range for {n} features")]
    FeatureIndex { index: usize, n: usize },
    #[error("interaction {0:?} is not part of the model")]
    PairNotInModel(Vec<usize>),
    #[error("{0}")]
    Unsupported(String),

    #[error("model file version {found} is not supported (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },
    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable identifier, used by the CLI error channel.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape-mismatch",
            Error::NonScalarRoot(_) => "non-scalar-root",
            Error::NotFound(_) => "not-found",
            Error::Schema(_) => "schema-invalid",
            Error::MissingColumn(_) => "missing-column",
            Error::Parse { .. } => "parse-error",
            Error::MissingValue { .. } => "missing-value",
            Error::RowLength { .. } => "row-length",
            Error::EmptyDataset => "empty-dataset",
            Error::UnseenCategory { .. } => "unseen-category",
            Error::FoldRange { .. } => "fold-range",
            Error::FoldOverlap { .. } => "fold-overlap",
            Error::Split(_) => "split-invalid",
            Error::Config(_) => "config-invalid",
            Error::Divergence { .. } => "divergence",
            Error::InvalidTarget(_) => "invalid-target",
            Error::SingleClass => "single-class",
            Error::MetricInput { .. } => "metric-input",
            Error::UnknownGroup { .. } => "unknown-group",
            Error::UnknownFeature(_) => "unknown-feature",
            Error::FeatureIndex { .. } => "feature-index",
            Error::PairNotInModel(_) => "pair-not-in-model",
            Error::Unsupported(_) => "unsupported",
            Error::ModelVersion { .. } => "model-version",
            Error::ModelFormat(_) => "model-format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
