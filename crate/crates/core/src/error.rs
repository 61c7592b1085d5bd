use thiserror::Error;

/// Errors raised across the estimation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("empty data")]
    EmptyData,

    #[error("non-finite value at row {row}, column '{column}'")]
    NonFinite { row: usize, column: String },

    #[error("constant column '{0}' cannot be standardized")]
    ConstantColumn(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("retraction failed: {0}")]
    Retraction(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("objective evaluation failed at iteration {iter}: {source}")]
    Objective {
        iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
