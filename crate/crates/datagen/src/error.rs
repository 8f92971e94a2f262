use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    /// A source dataset is not on disk.
    #[error("{what} not found under {looked_in}; {instruction}")]
    Unavailable { what: String, looked_in: String, instruction: String },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;
