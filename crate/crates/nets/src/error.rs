use dcr_core::CavError;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cav(#[from] CavError),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;
