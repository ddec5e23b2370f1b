use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty shape")]
    EmptyShape,

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite function value at coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("no step below 0")]
    NoStepBelowZero,

    #[error("step {step} out of range 0..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("invalid quantizer: {0}")]
    InvalidQuantizer(String),

    #[error("level {level} outside [0, {max}]")]
    LevelOutOfRange { level: i64, max: i64 },

    #[error("unregistered quantization site `{0}`")]
    UnknownSite(String),

    #[error("group {group} not present (store has {available} groups)")]
    UnknownGroup { group: usize, available: usize },

    #[error("invalid group plan: {0}")]
    InvalidPlan(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value during {context} at epoch {epoch}")]
    Diverged { context: String, epoch: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("serialization: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
