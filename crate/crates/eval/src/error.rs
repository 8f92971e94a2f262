use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Not enough (or the wrong kind of) data for the requested metric.
    #[error("data error: {0}")]
    Data(String),
    #[error("equalized odds undefined: no examples with label y={label}, attribute a={attribute}")]
    EmptyCell { label: u8, attribute: u8 },
    #[error(transparent)]
    Net(#[from] dcr_nets::NetError),
    #[error(transparent)]
    Cav(#[from] dcr_core::CavError),
    #[error(transparent)]
    Train(#[from] dcr_trainer::TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;
