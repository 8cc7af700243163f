use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("numeric error{}: {message}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { step: Option<usize>, message: String },

    #[error("determinism violation: {0}")]
    Determinism(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("missing {artifact}; run `{producer}` first")]
    Dependency { artifact: String, producer: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn numeric(step: Option<usize>, message: impl Into<String>) -> Self {
        Error::Numeric {
            step,
            message: message.into(),
        }
    }

    pub fn dependency(artifact: impl Into<String>, producer: impl Into<String>) -> Self {
        Error::Dependency {
            artifact: artifact.into(),
            producer: producer.into(),
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::Format { .. } => "format",
            Error::Numeric { .. } => "numeric",
            Error::Determinism(_) => "determinism",
            Error::Config(_) => "invalid_config",
            Error::Dependency { .. } => "dependency",
            Error::Io(_) => "io",
        }
    }
}
