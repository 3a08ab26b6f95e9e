use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: left has {left} nodes (dim {left_dim}), right has {right} nodes (dim {right_dim})")]
    GridMismatch {
        left: usize,
        left_dim: usize,
        right: usize,
        right_dim: usize,
    },

    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("precondition failed: {what} (residual {residual:.3e}, tolerance {tolerance:.3e})")]
    Precondition {
        what: String,
        residual: f64,
        tolerance: f64,
    },

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("no convergence before t = {t_max}: residual history {history:?}")]
    NonConvergence { t_max: f64, history: Vec<f64> },

    #[error("kernel construction: {0}")]
    Kernel(String),

    #[error("time {t} exceeds configured horizon {t_max}")]
    Horizon { t: f64, t_max: f64 },

    #[error("time {0} is not reachable from the kernel ladder (must be a multiple of the base step)")]
    OffLadder(f64),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
