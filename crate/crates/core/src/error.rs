use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of a function (e.g. `t` outside `[0, 1]`).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// `β_t` too close to zero for a score conversion.
    #[error("score singularity at t = {t}: beta_t = {beta:e} is below tolerance")]
    Singularity { t: f64, beta: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite value during training or a network evaluation.
    #[error("numeric failure at iteration {iteration}: {detail}")]
    Numeric { iteration: u64, detail: String },

    /// Non-finite state during ODE/SDE integration.
    #[error("integration failure at step {step} (t = {t}){}: {detail}", path.map(|p| format!(", path {p}")).unwrap_or_default())]
    Integration {
        step: usize,
        t: f64,
        path: Option<usize>,
        detail: String,
    },

    #[error("degenerate pair: |x1 - x0| = {0:e}")]
    DegeneratePair(f64),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Attach a trajectory index to an integration error.
    pub fn with_path(self, index: usize) -> Self {
        match self {
            Error::Integration {
                step, t, detail, ..
            } => Error::Integration {
                step,
                t,
                path: Some(index),
                detail,
            },
            other => other,
        }
    }
}
