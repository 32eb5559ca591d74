use thiserror::Error;

/// Errors produced across the localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("channel capacity exceeded: requested {requested} tags, at most {max} supported")]
    CapacityExceeded { requested: usize, max: usize },

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("observation dropped: {0}")]
    ObservationDropped(String),

    #[error("degenerate geometry in blocks [{}]", .blocks.join(", "))]
    DegenerateGeometry { blocks: Vec<String> },

    #[error("metric alignment: {0}")]
    MetricAlignment(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
