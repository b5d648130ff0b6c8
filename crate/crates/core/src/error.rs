use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, range, missing tape).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared while simulating.
    #[error("simulation fault at step {step}: {detail}")]
    SimFault { step: usize, detail: String },

    #[error("scene construction failed: {0}")]
    Scene(String),

    /// Planner or trainer produced a non-finite loss.
    #[error("{stage} diverged at iteration {iteration}: {detail}")]
    Diverged {
        stage: &'static str,
        iteration: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed artifact {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
