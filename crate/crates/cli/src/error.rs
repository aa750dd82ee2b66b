use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("initial condition fit failed: misfit {misfit:.3e} exceeds tolerance {tolerance:.1e}")]
    Fit { misfit: f64, tolerance: f64 },

    #[error(transparent)]
    Core(#[from] paramflow::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit code: 2 for bad input, 3 for training failures, 4 for
    /// initial-condition fits that miss their tolerance, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                paramflow::Error::Config(_) | paramflow::Error::Dimension { .. } | paramflow::Error::Unsupported(_) => 2,
                paramflow::Error::Diverged { .. } | paramflow::Error::NonFinite { .. } => 3,
                _ => 1,
            },
            CliError::Training(_) => 3,
            CliError::Fit { .. } => 4,
            CliError::Io(_) | CliError::Json(_) => 1,
        }
    }
}
