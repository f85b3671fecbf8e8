use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or an invalid configuration document (exit status 2).
    #[error("{0}")]
    Usage(String),

    #[error("experiment `{experiment}`: {source}")]
    Module {
        experiment: String,
        #[source]
        source: gedmd::Error,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
