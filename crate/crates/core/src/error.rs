use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate vector (norm < 1e-12) at {0}")]
    DegenerateVector(String),

    #[error("template on line {line} is malformed: {reason}")]
    MalformedTemplate { line: usize, reason: String },

    #[error("template bank is empty")]
    EmptyBank,

    #[error("category set is invalid: {0}")]
    InvalidCategories(String),

    #[error("container format error: {0}")]
    Format(String),

    #[error("container corrupted: {0}")]
    Corruption(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("internal consistency violated: {0}")]
    Consistency(String),

    #[error("embedder failed: {0}")]
    Embedder(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::MalformedTemplate { .. }
            | Error::EmptyBank
            | Error::InvalidCategories(_) => 2,
            _ => 3,
        }
    }
}
