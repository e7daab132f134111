use std::io;
use std::path::PathBuf;

use nnwm_core::ErrorKind;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] nnwm_core::Error),
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("gradient check failed: max relative error {max_rel_error:e} > {tolerance:e}")]
    GradCheck { max_rel_error: f64, tolerance: f64 },
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// 2 for configuration problems, 3 for unreadable or malformed data,
    /// 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config | ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            },
            CliError::Config { .. } => 2,
            CliError::Io { .. } | CliError::Json { .. } | CliError::Format { .. } => 3,
            CliError::GradCheck { .. } => 4,
        }
    }
}
