use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("non-finite adjoint at tape node {node}")]
    NonFiniteAdjoint { node: usize },

    #[error("non-finite value at coordinate {index} during finite-difference check")]
    NonFiniteProbe { index: usize },

    #[error("chain diverged at step {step}")]
    Diverged { step: usize },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("{aborted} of {steps} training steps aborted (limit 1%)")]
    TooManyAborts { aborted: u64, steps: u64 },

    #[error("output directory is locked by {0}; remove it if no other run is active")]
    Locked(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("classifier accuracy {accuracy:.4} below required {required:.2}")]
    ClassifierPrecondition { accuracy: f64, required: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numerical failures that abort a single training step rather than
    /// the run.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. } | Error::NonFinite { .. } | Error::NonFiniteAdjoint { .. }
        )
    }

    /// Short machine-readable class name, used by the CLI's error line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Invalid(_) => "invalid",
            Error::NonScalarOutput(_) => "non_scalar",
            Error::NonFiniteAdjoint { .. } => "non_finite_adjoint",
            Error::NonFiniteProbe { .. } => "non_finite_probe",
            Error::Diverged { .. } => "diverged",
            Error::NonFinite { .. } => "non_finite",
            Error::TooManyAborts { .. } => "too_many_aborts",
            Error::Locked(_) => "locked",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::ClassifierPrecondition { .. } => "classifier_precondition",
            Error::Io { .. } => "io",
        }
    }
}
