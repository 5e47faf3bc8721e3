use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("point {index} at ({lon}, {lat}) lies outside the grid")]
    OutOfBounds { index: usize, lon: f64, lat: f64 },

    #[error("no road segment within {radius} m of point {index}")]
    Unmatchable { index: usize, radius: f64 },

    #[error("no road path connects point {from} to point {to}")]
    Disconnected { from: usize, to: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("benchmark error: {0}")]
    Benchmark(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint incompatible: {0}")]
    Compatibility(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
