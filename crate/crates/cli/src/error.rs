use thiserror::Error;

/// Failures of a command, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or missing configuration, including unreadable inputs.
    #[error("config error: {0}")]
    Config(String),

    #[error("model file error: {0}")]
    Model(String),

    #[error(transparent)]
    Core(#[from] spen_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for numeric failures (NaN/Inf during training), 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric() => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
