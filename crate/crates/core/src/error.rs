use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("not enough samples to form a feature window: {0}")]
    EmptyFeatures(String),
    #[error("threshold calibration failed: {0}")]
    Calibration(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
