use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step {step} outside 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("token {token} outside 0..{limit}")]
    TokenOutOfRange { token: usize, limit: usize },

    #[error("masked token at dimension {dim} where a clean token is required")]
    MaskedToken { dim: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("row {row} is not a probability vector (sum {sum})")]
    NotNormalized { row: usize, sum: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("state z_t is unreachable under the schedule")]
    Unreachable,

    #[error("state space of size {size} exceeds the enumeration limit {limit}")]
    EnumerationTooLarge { size: u128, limit: usize },

    #[error("non-finite value at step {step}, iteration {iteration}: {what}")]
    NonFinite {
        step: usize,
        iteration: usize,
        what: String,
    },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
