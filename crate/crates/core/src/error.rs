use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("divergence-free construction impossible: {0}")]
    NoDivergenceFreeField(String),

    #[error("bracket depth {depth} exceeds configured maximum {max}")]
    BracketDepth { depth: usize, max: usize },

    #[error("configuration lies on the generalized diagonal (points {0} and {1} coincide)")]
    OnDiagonal(usize, usize),

    #[error("noise index {index} outside path range [{min}, {max}]")]
    OutsidePath { index: i64, min: i64, max: i64 },

    #[error("refinement level {level} exceeds maximum {max}")]
    RefinementDepth { level: u32, max: u32 },

    #[error("non-finite state at step {step}: {what}")]
    NonFinite { step: i64, what: String },

    #[error("backward-time integration requested ({from} -> {to})")]
    BackwardTime { from: i64, to: i64 },

    #[error("time {0} is not on the integration grid")]
    OffGrid(f64),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("insufficient samples: need {needed}, have {have}")]
    InsufficientSamples { needed: usize, have: usize },

    #[error("exponential moment diverges: alpha {alpha} >= tail rate {rate}")]
    MomentDiverges { alpha: f64, rate: f64 },

    #[error("centering constant not resolved: half-width {achieved} > tolerance {requested}")]
    CenteringPrecision { achieved: f64, requested: f64 },

    #[error("resource budget exceeded: {requested} particle-steps > {budget}")]
    Budget { requested: f64, budget: f64 },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;
