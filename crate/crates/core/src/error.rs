use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("invalid hierarchical graph spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid encoder table: {0}")]
    InvalidEncoder(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("batch size {0} must be a positive multiple of 3")]
    InvalidBatchSize(usize),

    #[error("resampling requires teacher features")]
    TeacherMissing,

    #[error("nearest-neighbor search over an empty candidate set")]
    EmptyCandidates,

    #[error("class {class} has {count} samples, at least 2 are required")]
    ClassTooSmall { class: usize, count: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
