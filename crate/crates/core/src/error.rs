use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch between operands")]
    GridMismatch,

    #[error("time grid mismatch: expected {expected} nodes, found {found}")]
    TimeGridMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("operation requires a {required}D grid, got {found}D")]
    Dimension { required: usize, found: usize },

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("solution blow-up at t = {time}: |value| = {magnitude:e} exceeds {limit:e}")]
    BlowUp { time: f64, magnitude: f64, limit: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("primal-dual iteration diverged at iteration {iteration}: gap {gap:e}")]
    Diverged { iteration: usize, gap: f64 },

    #[error("no level set of unit measure: {0}")]
    NoLevel(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("malformed field file {file}: {message}")]
    FieldFormat { file: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
