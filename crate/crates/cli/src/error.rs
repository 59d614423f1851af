use thiserror::Error;

/// Front-end failures. Usage problems (bad flags, unreadable or invalid
/// configs) exit with status 2; numerical and I/O failures with status 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("config validation error: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] walkdiff_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) | CliError::Validation(_) | CliError::Usage(_) => 2,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Parse(_) => "parse_error",
            CliError::Validation(_) => "validation_error",
            CliError::Usage(_) => "usage_error",
            CliError::Core(e) => e.code(),
            CliError::Io { .. } => "io_error",
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
