//! CLI error taxonomy mapped to process exit codes:
//! 0 success, 1 usage/input error, 2 numerical abort.

use std::fmt;
use std::path::PathBuf;

use hyperssm_core::data::DataError;
use hyperssm_core::Error as CoreError;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or unusable input files.
    Usage(String),
    Data(DataError),
    Io { path: PathBuf, source: std::io::Error },
    /// Numerical failure inside the math stack.
    Math(CoreError),
    NonFiniteLoss { step: usize },
    NonFiniteGrad { step: usize, param: String },
}

impl CliError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Data(_) | Self::Io { .. } => 1,
            Self::Math(_) | Self::NonFiniteLoss { .. } | Self::NonFiniteGrad { .. } => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(msg) => write!(f, "usage error: {msg}"),
            Self::Data(e) => write!(f, "data error: {e}"),
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::Math(e) => write!(f, "numerical error: {e}"),
            Self::NonFiniteLoss { step } => {
                write!(f, "non-finite loss at step {step}; aborting")
            }
            Self::NonFiniteGrad { step, param } => {
                write!(f, "non-finite gradient for {param} at step {step}; aborting")
            }
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Data(e)
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        Self::Math(e)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;
