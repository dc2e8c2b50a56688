use std::fmt;
use std::path::Path;

/// Process exit codes: 1 for bad arguments or config, 2 for bad or missing
/// input data.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Data(m) => f.write_str(m),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub trait Context<T> {
    /// Any failure is a config or argument problem.
    fn usage_err(self, what: &str) -> CliResult<T>;
    /// Any failure is an input-data problem.
    fn data_err(self, what: &str) -> CliResult<T>;
    fn data_at(self, path: &Path) -> CliResult<T>;
}

impl<T, E: fmt::Display> Context<T> for Result<T, E> {
    fn usage_err(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::Usage(format!("{what}: {e}")))
    }

    fn data_err(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::Data(format!("{what}: {e}")))
    }

    fn data_at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

pub fn bad_data(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}
