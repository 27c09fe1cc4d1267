//! Error category of a failed run, mapped onto the process exit code.

use multiway::CoreError;
use std::fmt;

/// What went wrong, by who has to fix it: the config file, the data files,
/// the numerics, or the machine.
#[derive(Debug)]
pub enum CliError {
    /// Invalid or inconsistent configuration (exit code 2).
    Config(String),
    /// Unreadable or inconsistent input data (exit code 3).
    Data(String),
    /// A fit or decomposition failed numerically (exit code 4).
    Numerical(String),
    /// The operating system refused a read or write (exit code 5).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::Io(inner) => CliError::Io(inner.to_string()),
            CoreError::Parse { .. }
            | CoreError::ShapeMismatch(_)
            | CoreError::InvalidMode { .. }
            | CoreError::SizeCapExceeded { .. } => CliError::Data(e.to_string()),
            CoreError::NotPositiveDefinite { .. }
            | CoreError::SingularConditioning { .. }
            | CoreError::RankDeficient { .. }
            | CoreError::Domain(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
