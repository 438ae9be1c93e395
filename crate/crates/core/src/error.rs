use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("stale or mismatched forward cache: {0}")]
    StaleCache(String),

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("IRLS did not converge after {iterations} iterations (deviance trace: {trace:?})")]
    NoConvergence { iterations: usize, trace: Vec<f64> },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("cannot parse cell at row {row}, column `{column}`: `{value}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Stable machine-readable code used by the CLI error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidInput(_) => "invalid_input",
            Error::NonFinite(_) => "non_finite",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::StaleCache(_) => "stale_cache",
            Error::EmptyGroup(_) => "empty_group",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Divergence { .. } => "divergence",
            Error::Undefined(_) => "undefined_metric",
            Error::UnknownColumn(_) => "unknown_column",
            Error::Parse { .. } => "parse_error",
            Error::Format(_) => "format_error",
            Error::Io(_) => "io_error",
            Error::Csv(_) => "csv_error",
            Error::Json(_) => "json_error",
        }
    }
}
