use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unit {unit_id}: {msg}")]
    InvalidUnit { unit_id: String, msg: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("level {level} has no effect parameters")]
    UnknownLevel { level: usize },

    #[error("intervention at t={t_apply} cannot affect earlier time t={t_now}")]
    FutureIntervention { t_apply: usize, t_now: usize },

    #[error("rank deficient {context}: rank {rank} < {expected} (condition {cond:.3e})")]
    RankDeficient {
        context: String,
        rank: usize,
        expected: usize,
        cond: f64,
    },

    #[error("numerically singular matrix in {context} (condition estimate {cond:.3e})")]
    Singular { context: String, cond: f64 },

    #[error("inversion domain violation at component {component}: ratio {ratio}")]
    InversionDomain { component: usize, ratio: f64 },

    #[error("degenerate lag values at component {component}")]
    Degenerate { component: usize },

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("assumption check failed: {0}")]
    AssumptionFailed(String),

    #[error("identification of level {level} failed: {source}")]
    Identification {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("optimization diverged at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },

    #[error("csv error: {0}")]
    Csv(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than by the input data.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::RankDeficient { .. }
            | Error::Singular { .. }
            | Error::InversionDomain { .. }
            | Error::Degenerate { .. }
            | Error::NonFinite(_)
            | Error::Divergence { .. } => true,
            Error::Identification { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
