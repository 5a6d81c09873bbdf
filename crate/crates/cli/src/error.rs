use flowlab_core::{MetricError, SamplerError, ScheduleError, ScoreError, TargetError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Ran to completion but at least one check failed.
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TargetError> for CliError {
    fn from(e: TargetError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ScoreError> for CliError {
    fn from(e: ScoreError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Score(s) => s.into(),
            SamplerError::DimensionMismatch { .. } | SamplerError::EmptyBatch => CliError::Validation(e.to_string()),
            SamplerError::DegenerateJacobian { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Sampler(s) => s.into(),
            MetricError::Score(s) => s.into(),
            MetricError::NonMonotoneMap(_) | MetricError::MissingDensity(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}
