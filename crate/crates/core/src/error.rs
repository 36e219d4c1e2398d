use thiserror::Error;

pub type Result<T, E = CarError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CarError {
    /// A configuration value is out of its admissible range.
    #[error("invalid `{field}`: {message}")]
    InvalidParameter { field: String, message: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("covariate {index} has level {value}, valid levels are 0..{levels}")]
    InvalidLevel {
        index: usize,
        value: f64,
        levels: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A two-sample statistic whose denominator vanished.
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    /// Replayed log disagrees with the engine.
    #[error("replay mismatch at unit {index}: {message}")]
    ReplayMismatch { index: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CarError {
    pub fn param(field: impl Into<String>, message: impl Into<String>) -> Self {
        CarError::InvalidParameter {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        CarError::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }

    /// Name of the offending field, when the error is attributable to one.
    pub fn field(&self) -> Option<&str> {
        match self {
            CarError::InvalidParameter { field, .. } => Some(field),
            CarError::DimensionMismatch { .. } | CarError::InvalidLevel { .. } => {
                Some("covariates")
            }
            _ => None,
        }
    }
}
