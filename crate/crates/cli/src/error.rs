use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage} failed: {source}")]
    Runtime {
        stage: &'static str,
        #[source]
        source: mvsde_core::Error,
    },

    #[error("threshold not met: {0}")]
    Threshold(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 1 for bad input, 2 for runtime failures, 3 for failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema { .. } | CliError::Invalid(_) => 1,
            CliError::Io { .. } | CliError::Runtime { .. } => 2,
            CliError::Threshold(_) => 3,
        }
    }
}

/// Tags a core error with the pipeline stage it came from.
pub(crate) trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> Stage<T> for mvsde_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| CliError::Runtime { stage, source })
    }
}
