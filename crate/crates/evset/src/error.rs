use std::path::PathBuf;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("checkpoint does not match the configuration: {0}")]
    CheckpointMismatch(String),
    #[error("gradient check failed: max relative error {max_rel_err:.3e} > {tolerance:.1e}")]
    GradCheck { max_rel_err: f64, tolerance: f64 },
    #[error("malformed {what} in {}: {msg}", .path.display())]
    Format {
        what: &'static str,
        path: PathBuf,
        msg: String,
    },
    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] evset_core::Error),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::MissingFile(_) => 4,
            CliError::CheckpointMismatch(_) => 5,
            CliError::GradCheck { .. } => 6,
            CliError::Core(evset_core::Error::Config(_)) => 3,
            CliError::Format { .. } | CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path)
        } else {
            CliError::Io { path, source }
        }
    }
}
