use thiserror::Error;

use crate::policy::TaskId;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpeedError {
    #[error("index out of range: {what} = {index}, limit {limit}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("task {0} is latent; its pass rate is not defined by the policy")]
    LatentTask(TaskId),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("enumeration of {required} cases exceeds the cap of {cap}")]
    EnumerationCap { required: f64, cap: u64 },
    #[error("unknown task id {0}")]
    UnknownTask(TaskId),
    #[error("response/request mismatch: {0}")]
    ResponseMismatch(String),
    #[error("buffer underflow: need {needed} entries, have {available}")]
    BufferUnderflow { needed: usize, available: usize },
    #[error("engine failure at iteration {iteration} (step {step}): {source}")]
    Engine {
        iteration: usize,
        step: usize,
        #[source]
        source: Box<SpeedError>,
    },
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = SpeedError> = std::result::Result<T, E>;

impl From<std::io::Error> for SpeedError {
    fn from(err: std::io::Error) -> Self {
        SpeedError::Io(err.to_string())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> SpeedError {
    SpeedError::InvalidParameter(msg.into())
}
