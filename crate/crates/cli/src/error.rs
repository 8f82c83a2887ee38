use std::fmt;

use protonam::Error;

/// Error reported on stderr as `{"kind": ..., "message": ...}`.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub code: i32,
}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_VERSION: i32 = 3;

impl CliError {
    pub fn input(kind: &str, message: impl Into<String>) -> Self {
        CliError {
            kind: kind.to_string(),
            message: message.into(),
            code: EXIT_INPUT,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "kind": self.kind, "message": self.message }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ModelVersion { .. } => EXIT_VERSION,
        Error::NotFound(_)
        | Error::Schema(_)
        | Error::MissingColumn(_)
        | Error::Parse { .. }
        | Error::MissingValue { .. }
        | Error::RowLength { .. }
        | Error::EmptyDataset
        | Error::UnseenCategory { .. }
        | Error::FoldRange { .. }
        | Error::FoldOverlap { .. }
        | Error::Split(_)
        | Error::Config(_)
        | Error::InvalidTarget(_)
        | Error::UnknownGroup { .. }
        | Error::UnknownFeature(_)
        | Error::FeatureIndex { .. }
        | Error::PairNotInModel(_)
        | Error::Unsupported(_)
        | Error::ModelFormat(_)
        | Error::Json(_)
        | Error::Csv(_) => EXIT_INPUT,
        _ => EXIT_FAILURE,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            kind: e.kind().to_string(),
            message: e.to_string(),
            code: exit_code(&e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e).into()
    }
}

/// Renames a not-found error after the input it concerns, so callers can
/// tell a missing schema from a missing data file.
pub trait Context<T> {
    fn input(self, what: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for protonam::Result<T> {
    fn input(self, what: &str) -> Result<T, CliError> {
        self.map_err(|e| match e {
            Error::NotFound(p) => CliError::input(&format!("{what}-not-found"), format!("{what} file not found: {}", p.display())),
            Error::Json(j) => CliError::input(&format!("{what}-malformed"), format!("{what} file: {j}")),
            other => other.into(),
        })
    }
}
