use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("gap error: missing value for column '{column}' at line {line}")]
    Gap { column: String, line: usize },

    #[error("range error: {0}")]
    Range(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singular fit: dependent columns {columns:?}")]
    SingularFit { columns: Vec<String> },

    #[error("degenerate sensor '{sensor}': |k1| = {k1:e} below threshold")]
    DegenerateSensor { sensor: String, k1: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training diverged in fold {fold} at epoch {epoch}: {message}")]
    Training {
        fold: usize,
        epoch: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Contract(_) => ErrorClass::Config,
            Error::Parse { .. }
            | Error::Alignment(_)
            | Error::Gap { .. }
            | Error::Range(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorClass::Data,
            Error::Numeric(_)
            | Error::SingularFit { .. }
            | Error::DegenerateSensor { .. }
            | Error::Training { .. } => ErrorClass::Numeric,
        }
    }
}
