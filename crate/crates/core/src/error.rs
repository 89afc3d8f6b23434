use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parameters must contain at least one non-empty layer")]
    EmptyParams,

    #[error("layer {0} is empty")]
    EmptyLayer(String),

    #[error("unknown layer index {index} (have {layers} layers)")]
    UnknownLayer { index: usize, layers: usize },

    #[error("matrix is not symmetric positive semidefinite: {0}")]
    NotPsd(String),

    #[error("non-finite loss {value} at {context}")]
    NonFiniteLoss { value: f64, context: String },

    #[error("objective `{0}` does not provide a first-order gradient")]
    GradUnavailable(String),

    #[error("activation noise requested on analytic objective `{0}`")]
    ActivationNoiseOnAnalyticObjective(String),

    #[error("objective `{0}` has no activations")]
    ActivationsUnavailable(String),

    #[error("top-m selection needs 1 <= m <= {layers}, got m = {m}")]
    BadM { m: usize, layers: usize },

    #[error("invalid perturbation spec `{0}`")]
    BadPerturbSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("stepsize {eta} exceeds the admissible cap {cap}")]
    StepsizeTooLarge { eta: f64, cap: f64 },

    #[error("stepsize {eta} is above the one-step cap {cap}")]
    StepsizeAboveCap { eta: f64, cap: f64 },

    #[error("point is not stationary: |grad| = {0:e}")]
    NotStationary(f64),

    #[error("objective `{0}` carries no certified Lipschitz constant")]
    MissingLipschitzConstant(String),

    #[error("iterate left the certified domain (|theta| = {norm} > {radius})")]
    DomainExit { norm: f64, radius: f64 },

    #[error("aborted at step {step}: {source}")]
    Aborted {
        step: usize,
        /// Per-step records up to (not including) the failing step.
        trace: Vec<crate::trainer::TracePoint>,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Numeric failures as opposed to configuration or I/O problems.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFiniteLoss { .. }
            | Error::NotPsd(_)
            | Error::StepsizeTooLarge { .. }
            | Error::StepsizeAboveCap { .. }
            | Error::NotStationary(_)
            | Error::DomainExit { .. } => true,
            Error::Stage { source, .. } | Error::Aborted { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
