use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] mtloc::Error),

    /// A rerun produced an artifact that differs from the recorded one.
    #[error("rerun mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    /// 2 usage/config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use mtloc::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Mismatch(_) => 4,
            CliError::Core(e) => match e {
                E::Config(_) | E::Usage(_) | E::Shape(_) => 2,
                E::Numerical(_) => 4,
                E::Data(_) | E::MissingColumn(_) | E::Parse { .. } | E::Artifact(_) | E::Io { .. } | E::Csv(_) => 3,
            },
        }
    }
}
