//! File formats, the human labeling service and the staged command-line
//! pipeline around [`aler_core`].

pub mod commands;
pub mod encoder;
pub mod io;
pub mod manifest;
pub mod persist;
pub mod pipeline;
pub mod service;

pub use manifest::RunManifest;

/// Command failure, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    BudgetExhausted(String),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::BudgetExhausted(_) => 3,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<manifest::ManifestError> for CliError {
    fn from(e: manifest::ManifestError) -> Self {
        CliError::Validation(format!("manifest: {e}"))
    }
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        CliError::Validation(e.to_string())
    }
}
