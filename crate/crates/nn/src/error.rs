use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter layout mismatch: {0}")]
    Params(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
