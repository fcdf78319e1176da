use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A dataset, model or query file that could not be parsed.
    #[error("{path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: pdeplus::Error,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Run(#[from] pdeplus::Error),
}

impl CliError {
    pub fn file(path: &Path, source: std::io::Error) -> Self {
        CliError::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn load(path: &Path, source: pdeplus::Error) -> Self {
        CliError::Load {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for I/O and file formats, 2 for configuration, 3 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::File { .. } | CliError::Load { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Run(e) if e.is_io() => 1,
            CliError::Run(e) if e.is_numerical() => 3,
            CliError::Run(_) => 2,
        }
    }
}
