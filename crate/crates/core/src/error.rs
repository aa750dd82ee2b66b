use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {context} at t = {t}")]
    NonFinite { context: String, t: f64 },

    #[error("maximum number of solver steps ({0}) exceeded")]
    MaxSteps(usize),

    #[error("CFL condition violated: at least {required_steps} time steps are needed")]
    Cfl { required_steps: usize },

    #[error("linear system is singular (ridge {lambda:e})")]
    Singular { lambda: f64 },

    #[error("empty sample batch")]
    EmptyBatch,

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("unsupported pairing: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
