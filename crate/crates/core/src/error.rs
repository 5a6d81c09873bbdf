use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("{name} must be positive and finite, got {value}")]
    NonPositiveConstant { name: &'static str, value: f64 },
    #[error("c1 ln T / T = {0} must be below 1")]
    RateTooLarge(f64),
    #[error("beta_{step} = {beta} is outside (0, 1)")]
    BetaOutOfRange { step: usize, beta: f64 },
    #[error("alpha_bar = {0} is outside (0, 1]")]
    AlphaBarOutOfRange(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TargetError {
    #[error("mixture needs at least one component")]
    Empty,
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("component {index} has mean of length {got}, expected {expected}")]
    MeanLength { index: usize, got: usize, expected: usize },
    #[error("component {index} has non-positive or non-finite variance {variance}")]
    BadVariance { index: usize, variance: f64 },
    #[error("component {index} has invalid weight {weight}")]
    BadWeight { index: usize, weight: f64 },
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("point has dimension {got}, target has {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("product factors must be one-dimensional")]
    FactorNotScalar,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("step {step} outside 1..={steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("shift has length {got}, expected {expected}")]
    ShiftLength { got: usize, expected: usize },
    #[error("phases have length {got}, expected {expected}")]
    PhaseLength { got: usize, expected: usize },
    #[error("floor-lattice field requires a one-dimensional target, got d = {0}")]
    LatticeDimension(usize),
    #[error("injection step {step} outside 2..={steps}")]
    InjectionStep { step: usize, steps: usize },
    #[error("lattice width must be positive and finite, got {0}")]
    LatticeWidth(f64),
    #[error("dense Jacobian norms are limited to d <= {max}, got {got}")]
    DimensionTooLarge { got: usize, max: usize },
    #[error("Monte-Carlo sample count must be positive")]
    NoSamples,
    #[error("floor perturbation requested from a {0} field")]
    NotLattice(&'static str),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("degenerate Jacobian at step {step} (sample {index:?}): det = {det}")]
    DegenerateJacobian {
        index: Option<usize>,
        step: usize,
        det: f64,
    },
    #[error("initial point has dimension {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("batch element {0} carries no transported log-density")]
    MissingDensity(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("operation requires d = 1, got d = {0}")]
    NotScalar(usize),
    #[error("mapped grid is not strictly increasing at node {0}")]
    NonMonotoneMap(usize),
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("invalid argument: {0}")]
    BadArgument(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}
