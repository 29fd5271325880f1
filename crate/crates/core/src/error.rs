use std::path::PathBuf;

use crate::motion::RootConvention;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("expected a {expected:?} sequence, found {found:?}")]
    WrongConvention {
        expected: RootConvention,
        found: RootConvention,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("diffusion step {step} outside 1..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("degenerate posterior at step {0}: 1 - alpha_bar vanishes")]
    DegeneratePosterior(usize),
    #[error("feature layout has no {0} block")]
    MissingBlock(&'static str),
    #[error("unknown joint `{0}`")]
    UnknownJoint(String),
    #[error("mask scheme infeasible: {0}")]
    InfeasibleScheme(String),
    #[error("non-finite {what} at step {step}")]
    Diverged { what: &'static str, step: usize },
    #[error("insufficient samples: need {need}, have {have}")]
    InsufficientSamples { need: usize, have: usize },
    #[error("strategy {strategy} requires a mask-conditioned checkpoint")]
    StrategyMismatch { strategy: String },
    #[error("{what} digest mismatch: manifest {expected}, recomputed {actual}")]
    DigestMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("{path}: {message}")]
    Corpus { path: PathBuf, message: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
