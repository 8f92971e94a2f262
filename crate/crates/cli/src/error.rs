use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or input data.
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Validation(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::CheckFailed(_) => 4,
            CliError::Runtime(_) => 1,
        })
    }
}

impl From<dcr_trainer::TrainError> for CliError {
    fn from(e: dcr_trainer::TrainError) -> Self {
        use dcr_trainer::TrainError as E;
        match e {
            E::Divergence { .. } => CliError::Divergence(e.to_string()),
            E::Config(_) | E::InvalidInput(_) | E::Data(_) | E::Net(_) | E::Cav(_) => {
                CliError::Validation(e.to_string())
            }
            E::State(_) | E::Io(_) | E::Json(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<dcr_eval::EvalError> for CliError {
    fn from(e: dcr_eval::EvalError) -> Self {
        use dcr_eval::EvalError as E;
        match e {
            E::Io(_) | E::Csv(_) | E::Json(_) => CliError::Runtime(e.to_string()),
            E::Train(t) => t.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<dcr_datagen::DataError> for CliError {
    fn from(e: dcr_datagen::DataError) -> Self {
        match e {
            dcr_datagen::DataError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<dcr_nets::NetError> for CliError {
    fn from(e: dcr_nets::NetError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<dcr_core::CavError> for CliError {
    fn from(e: dcr_core::CavError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
