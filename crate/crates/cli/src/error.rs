use std::path::{Path, PathBuf};

/// Exit status for usage errors (bad flags or flag values).
pub const EXIT_USAGE: i32 = 1;
/// Exit status for unreadable or malformed files.
pub const EXIT_FORMAT: i32 = 2;
/// Exit status for numeric and configuration errors.
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: nomad_core::Error,
    },

    #[error("{0}")]
    Core(#[from] nomad_core::Error),

    #[error("{}: {source}", path.display())]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use nomad_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::File { source, .. } | CliError::Core(source) => match source {
                E::Format { .. } | E::Io(_) => EXIT_FORMAT,
                _ => EXIT_CONFIG,
            },
            CliError::Write { .. } | CliError::Csv(_) | CliError::Json(_) => EXIT_FORMAT,
        }
    }

    pub fn file(path: &Path) -> impl FnOnce(nomad_core::Error) -> CliError + '_ {
        move |source| CliError::File {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
