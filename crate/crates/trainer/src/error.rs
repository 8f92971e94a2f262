use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Runtime state inconsistent with the update being attempted.
    #[error("state error: {0}")]
    State(String),
    #[error("training diverged at epoch {epoch}, step {step}: {diagnostics}")]
    Divergence { epoch: usize, step: usize, diagnostics: String },
    #[error(transparent)]
    Net(#[from] dcr_nets::NetError),
    #[error(transparent)]
    Cav(#[from] dcr_core::CavError),
    #[error(transparent)]
    Data(#[from] dcr_datagen::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;
