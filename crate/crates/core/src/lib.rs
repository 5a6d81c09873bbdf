//! Discrete-time probability-flow sampling over Gaussian-mixture targets:
//! schedules, exact and perturbed score fields, the deterministic sampler
//! with density transport, distance estimators and the theory checks.

pub mod error;
pub mod metrics_theory;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score_models;
pub mod stats;
pub mod target;

pub use error::{MetricError, SamplerError, ScheduleError, ScoreError, TargetError};
pub use sampler::{run_trajectory, sample_batch, BatchSample, RunOptions, Trajectory};
pub use schedule::{NoiseLevel, PropertyCheck, PropertyId, PropertyReport, Schedule};
pub use score_models::{ErrorReport, ScoreField, ScoreKind, ScoreModel};
pub use target::{Component, GaussianMixture, MarginalFamily, ProductMixture, Target};
