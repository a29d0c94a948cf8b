use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    /// Input data is missing or unusable.
    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] occtrack::Error),
}

impl CliError {
    /// Process exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        use occtrack::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::InvalidSpec(_)) => 1,
            CliError::Core(E::NonFinite { .. }) => 3,
            CliError::Data(_) | CliError::Core(_) => 2,
        }
    }
}
