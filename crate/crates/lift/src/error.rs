//! Crate-wide error type.

use std::fmt;

/// Errors produced by any module of the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum LiftError {
    /// An argument violates a documented validity requirement.
    InvalidInput(String),
    /// Array or matrix dimensions do not line up.
    ShapeMismatch(String),
    /// A numerical precondition (e.g. normalized input) does not hold.
    Precondition(String),
    /// The requested configuration is outside the supported envelope.
    UnsupportedConfiguration(String),
    /// A text input could not be parsed; `row`/`col` are 1-based file coordinates.
    Parse {
        row: usize,
        col: usize,
        message: String,
    },
    /// A cache file does not match the dataset it is applied to.
    StaleCache(String),
    /// Training produced a non-finite loss.
    TrainingDiverged { epoch: usize, detail: String },
    /// Filesystem or serialization failure.
    Io(String),
}

impl fmt::Display for LiftError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Self::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Self::Precondition(msg) => write!(f, "precondition violated: {msg}"),
            Self::UnsupportedConfiguration(msg) => write!(f, "unsupported configuration: {msg}"),
            Self::Parse { row, col, message } => {
                write!(f, "parse error at row {row}, column {col}: {message}")
            }
            Self::StaleCache(msg) => write!(f, "stale cache: {msg}"),
            Self::TrainingDiverged { epoch, detail } => {
                write!(f, "training diverged at epoch {epoch}: {detail}")
            }
            Self::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for LiftError {}

impl From<std::io::Error> for LiftError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<serde_json::Error> for LiftError {
    fn from(e: serde_json::Error) -> Self {
        Self::Io(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, LiftError>;
