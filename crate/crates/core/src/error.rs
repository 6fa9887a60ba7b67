use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GdeError>;

#[derive(Debug, Error)]
pub enum GdeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range for {len} nodes")]
    Index { index: usize, len: usize },

    #[error("solver diverged after {nfe} field evaluations: {reason}")]
    Divergence { nfe: usize, reason: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("singular interaction between particles {i} and {j}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Singularity {
        i: usize,
        j: usize,
        step: Option<usize>,
    },

    #[error("zero target at t={t}, index {index}")]
    ZeroTarget { t: usize, index: usize },

    #[error("hybrid flow failed on interval {interval}: {source}")]
    Interval {
        interval: usize,
        #[source]
        source: Box<GdeError>,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GdeError {
    pub fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        GdeError::Shape { op, lhs, rhs }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GdeError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (divergence, NaN, singular forces).
    pub fn is_numerical(&self) -> bool {
        match self {
            GdeError::Divergence { .. } | GdeError::NonFinite(_) | GdeError::Singularity { .. } => {
                true
            }
            GdeError::Interval { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
