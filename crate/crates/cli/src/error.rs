use std::io;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),

    /// The output directory already holds results and `--force` was not given.
    #[error("refusing to overwrite {0}; pass --force to replace it")]
    Exists(String),

    #[error("output directory {0} is locked by another process")]
    Locked(String),

    #[error(transparent)]
    Lib(#[from] hetnoise::Error),

    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        use hetnoise::Error as E;
        match self {
            CliError::Usage(_) | CliError::Exists(_) | CliError::Locked(_) => 2,
            CliError::Lib(E::Config(_) | E::Json(_)) | CliError::Json(_) => 3,
            CliError::Lib(E::Domain(_)) => 4,
            CliError::Lib(E::Unsupported(_)) => 5,
            CliError::Lib(E::Divergence { .. } | E::NonFinite { .. }) => 6,
            CliError::Lib(E::Version { .. } | E::Corrupt(_)) => 7,
            CliError::Lib(E::Io(_)) | CliError::Io { .. } | CliError::Csv(_) => 8,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
