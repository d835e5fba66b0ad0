use std::path::PathBuf;

/// Failure of a command, carrying the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing upstream artifact {}: {hint}", path.display())]
    Dependency { path: PathBuf, hint: String },
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(dect_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Divergence(_) => 4,
            CliError::Io { .. } | CliError::Format { .. } | CliError::Core(_) => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    pub(crate) fn format(path: &std::path::Path, message: impl Into<String>) -> CliError {
        CliError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

impl From<dect_core::Error> for CliError {
    fn from(e: dect_core::Error) -> Self {
        match e {
            dect_core::Error::Divergence(m) => CliError::Divergence(m),
            other => CliError::Core(other),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
