use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box has non-finite coordinates {0:?}")]
    NonFinite([f64; 4]),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoresError {
    #[error("class scores need at least two entries (one foreground, one background), got {0}")]
    TooShort(usize),
    #[error("probability {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpdateError {
    #[error("parameter dimension mismatch: teacher has {teacher}, student has {student}")]
    DimensionMismatch { teacher: usize, student: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error("non-finite loss at iteration {iteration}: {dump}")]
    NonFinite { iteration: usize, dump: String },
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
