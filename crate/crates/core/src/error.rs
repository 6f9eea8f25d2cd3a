use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh needs at least 2 cells per side, got {0}")]
    MeshTooCoarse(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parameter value {value} at coordinate {index} lies outside [-1, 1]")]
    OutOfRange { index: usize, value: f64 },

    #[error("coefficient is not coercive at this parameter (alpha_lb = {alpha_lb:e})")]
    NotCoercive { alpha_lb: f64 },

    #[error("linear solver did not converge: relative residual {residual:e} after {iterations} iterations")]
    SolverNotConverged { residual: f64, iterations: usize },

    #[error("empty probe point set")]
    EmptyProbes,

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("weight {index} must be positive, got {value}")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("index set would exceed the cardinality cap of {cap}")]
    CardinalityCap { cap: usize },

    #[error("coefficient decay not observed along dimension {dimension} (slope {slope}); increase the regression degree")]
    NoCoefficientDecay { dimension: usize, slope: f64 },

    #[error("polyellipse rescaling infeasible: {0}")]
    RescaleInfeasible(String),

    #[error("need at least as many samples as basis functions (S = {samples}, M = {basis})")]
    TooFewSamples { samples: usize, basis: usize },

    #[error("design matrix is numerically rank deficient: rank {rank} of {basis}")]
    RankDeficient { rank: usize, basis: usize },

    #[error("reduced system is singular or indefinite at this parameter")]
    SingularReducedSystem,

    #[error("no coercive point in the training set")]
    NoCoercivePoint,

    #[error("first snapshot is numerically zero")]
    DependentFirstSnapshot,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Container(#[from] crate::experiments::container::ContainerError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
