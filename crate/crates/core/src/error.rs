use chrono::{NaiveDate, NaiveDateTime};
use psc_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("date {date} is outside the trading calendar ({first}..={last})")]
    CalendarCoverage {
        date: NaiveDate,
        first: NaiveDate,
        last: NaiveDate,
    },

    #[error("temporal order violated: {0}")]
    TemporalOrder(String),

    #[error("insufficient history for {id}: need {needed}, found {found}")]
    InsufficientHistory {
        id: String,
        needed: usize,
        found: usize,
    },

    #[error("cannot embed document: {0}")]
    Embedding(String),

    #[error("class balancing failed: {0}")]
    Balance(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("alignment config: {0}")]
    AlignmentConfig(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{0} is only available for cross-model attention alignment")]
    UnsupportedIntrospection(&'static str),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: {source}")]
    Divergence {
        step: usize,
        #[source]
        source: AutodiffError,
    },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error(transparent)]
    Numeric(#[from] AutodiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("invalid timestamp `{0}`")]
    Timestamp(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit status: 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::AlignmentConfig(_) => 1,
            Error::Numeric(_) | Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}

pub(crate) fn order_error(what: &str, a: NaiveDateTime, b: NaiveDateTime) -> Error {
    Error::TemporalOrder(format!("{what}: {a} is not before {b}"))
}
