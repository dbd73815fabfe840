use thiserror::Error;

/// CLI failure, split by who has to act on it.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, missing or malformed inputs. Exit code 1.
    #[error("{0}")]
    User(String),
    /// Input layout does not match the chosen adapter. Exit code 1.
    #[error("adapter mismatch in {file}, row {row}: {reason}")]
    AdapterMismatch { file: String, row: usize, reason: String },
    /// `report` was run before the evaluation outputs exist. Exit code 1.
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
    /// Anything that is a bug or an environment failure. Exit code 2.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn user(e: impl std::fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

pub(crate) fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

impl From<diets_core::training::TrainError> for CliError {
    fn from(e: diets_core::training::TrainError) -> Self {
        use diets_core::training::TrainError::*;
        match e {
            Divergence { .. } => internal(e),
            Model(diets_core::model::ModelError::Tensor(_)) => internal(e),
            other => user(other),
        }
    }
}
