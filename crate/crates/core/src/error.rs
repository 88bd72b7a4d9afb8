use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid instruction: {0}")]
    InvalidInstruction(String),

    #[error("could not place {object} objects with separation {separation} after {attempts} attempts")]
    SeparationUnreachable {
        object: usize,
        separation: f64,
        attempts: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient entries ({count}); update skipped")]
    NonFiniteGradient { count: usize },

    #[error("transition time must be positive, got {0}")]
    NonPositiveTime(f64),

    #[error("log-probability undefined for zero noise level")]
    DegenerateNoise,

    #[error("reward requested for {expected:?} but instruction is {got:?}")]
    TaskMismatch {
        expected: crate::scene::Task,
        got: crate::scene::Task,
    },

    #[error("invalid sampler: {0}")]
    InvalidSampler(String),

    #[error("no transition is both perturbed and optimized")]
    NoContributingSteps,

    #[error("step profile is identically zero: calibration without noise")]
    ZeroProfile,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
