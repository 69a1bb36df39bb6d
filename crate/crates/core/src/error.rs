use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the model, inference and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on counts, probabilities or indices was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// A matrix that must be symmetric positive-definite was not.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input data was structurally invalid (missing labels, bad shapes).
    #[error("invalid input: {0}")]
    Input(String),

    /// Every particle received zero weight.
    #[error("degenerate particle set at frame {frame}")]
    Degenerate { frame: usize },

    #[error("training diverged at epoch {epoch}: {message}")]
    Divergence { epoch: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Numeric(_) => "numeric",
            Error::Input(_) => "input",
            Error::Degenerate { .. } => "degenerate",
            Error::Divergence { .. } => "divergence",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
