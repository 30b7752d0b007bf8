use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("empty group")]
    EmptyGroup,
    #[error("non-finite function value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
