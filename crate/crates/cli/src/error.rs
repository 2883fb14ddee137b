use thiserror::Error;
use ttsa_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    /// A validation or acceptance check failed under `--strict`.
    #[error("strict check failed: {0}")]
    Strict(String),
}

impl CliError {
    /// 2 config error, 3 numerical failure, 4 strict-mode check failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 1,
            CliError::Strict(_) => 4,
            CliError::Core(e) => match e {
                CoreError::Dimension { .. }
                | CoreError::InvalidOracle(_)
                | CoreError::InvalidSchedule(_)
                | CoreError::InvalidMdp(_)
                | CoreError::InvalidArgument(_)
                | CoreError::InsufficientGrid { .. }
                | CoreError::MissingNoiseLog => 2,
                CoreError::AssumptionViolated(_) | CoreError::NoiseFloorViolated { .. } => 4,
                _ => 3,
            },
        }
    }
}
