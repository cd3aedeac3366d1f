use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("ensemble needs at least 2 members, found {0}")]
    TooFewMembers(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("factorization failed even with relative jitter {jitter:e}")]
    SolveFailed { jitter: f64 },

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid prior: {0}")]
    Prior(String),

    #[error("model evaluation failed for member {member}: {message}")]
    Model { member: usize, message: String },

    #[error("{0}")]
    ModelInput(String),

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("local update for anchor {anchor} failed: {source}")]
    Anchor {
        anchor: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("flow solver failed: {0}")]
    Flow(String),

    #[error("transport solver failed: {0}")]
    Transport(String),

    #[error("eigen-decomposition failed: {0}")]
    Eigen(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn model(message: impl Into<String>) -> Self {
        Error::ModelInput(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::TooFewMembers(_) => "too_few_members",
            Error::NonFinite(_) => "non_finite",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::SolveFailed { .. } => "solve_failed",
            Error::DegenerateEnsemble(_) => "degenerate_ensemble",
            Error::Config(_) => "config",
            Error::Prior(_) => "prior",
            Error::Model { .. } | Error::ModelInput(_) => "model",
            Error::Iteration { source, .. } | Error::Anchor { source, .. } => source.kind(),
            Error::Flow(_) => "flow",
            Error::Transport(_) => "transport",
            Error::Eigen(_) => "eigen",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }
}
