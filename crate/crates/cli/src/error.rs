use rrsgd_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0} invalid row(s) in the results")]
    InvalidRows(usize),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 0 ok, 2 config, 3 capability, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Capability(_) => 3,
            CliError::Numerical(_) | CliError::InvalidRows(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Argument(_) | CoreError::Dimension { .. } | CoreError::Config(_) => {
                CliError::Config(e.to_string())
            }
            CoreError::Capability(_) => CliError::Capability(e.to_string()),
            CoreError::Stream(_) | CoreError::Divergence { .. } | CoreError::DegenerateFit(_) => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}
