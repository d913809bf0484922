use std::path::PathBuf;

use bilinear_ssm::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const INVALID: i32 = 2;
    pub const IO: i32 = 3;
    pub const ALL_DIVERGED: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing {what} at {path} (run `bssm {hint}` first)")]
    Missing {
        what: &'static str,
        path: PathBuf,
        hint: &'static str,
    },
    #[error("every seed diverged ({0} runs)")]
    AllDiverged(usize),
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => exit::INVALID,
            CliError::Io { .. } | CliError::Missing { .. } => exit::IO,
            CliError::AllDiverged(_) => exit::ALL_DIVERGED,
            CliError::ChecksFailed { .. } => exit::FAILURE,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::RoutingNotSupported { .. } => exit::INVALID,
                CoreError::Io(_) | CoreError::Json(_) | CoreError::Format(_) => exit::IO,
                _ => exit::FAILURE,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
