use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("incompatible configuration: {0}")]
    Incompatible(String),

    /// Every run of the command diverged; nothing usable was produced.
    #[error("{0}")]
    AllDiverged(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(meshopt::error::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 1 for I/O failures, 2 for invalid input,
    /// 3 when only divergent runs were produced, 4 for unsupported pairings.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Core(meshopt::error::Error::Io(_) | meshopt::error::Error::Csv(_)) => 1,
            CliError::Config(_) | CliError::Core(_) => 2,
            CliError::AllDiverged(_) => 3,
            CliError::Incompatible(_) => 4,
        }
    }
}

impl From<meshopt::error::Error> for CliError {
    fn from(e: meshopt::error::Error) -> Self {
        match &e {
            meshopt::error::Error::Incompatible(msg) => CliError::Incompatible(msg.clone()),
            meshopt::error::Error::NoConvergentParameter { .. } => CliError::AllDiverged(e.to_string()),
            _ => CliError::Core(e),
        }
    }
}
