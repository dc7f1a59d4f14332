use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Command failure, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: config, flags, grid names, mismatched files. Exit 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running: I/O, corrupt artifacts, divergence. Exit 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<gist_core::Error> for CliError {
    fn from(e: gist_core::Error) -> Self {
        match e {
            gist_core::Error::Config(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("I/O error: {e}"))
    }
}
