use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite {what}: {} not found", path.display())]
    Missing { what: String, path: PathBuf },
    #[error(transparent)]
    Core(#[from] bdgxrl::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 0 success, 2 config error, 3 missing prerequisite, 4 numerical
    /// failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(
                bdgxrl::Error::InvalidArgument(_)
                | bdgxrl::Error::NormalizerMismatch(_)
                | bdgxrl::Error::Dim { .. }
                | bdgxrl::Error::Shape { .. },
            ) => 2,
            CliError::Json(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
