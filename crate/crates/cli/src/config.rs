//! Experiment configuration: TOML blocks `schedule`, `target`, `score`,
//! `run`, and the optional `scan`, `grid`, `theory` and `counterexample`.

use std::path::PathBuf;
use std::sync::Arc;

use flowlab_core::metrics_theory::{Grid1d, DEFAULT_C6};
use flowlab_core::score_models::lattice_width_for_error;
use flowlab_core::{Component, GaussianMixture, MarginalFamily, ProductMixture, Schedule, ScoreKind, Target};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: ScheduleConfig,
    pub target: TargetConfig,
    #[serde(default)]
    pub score: ScoreConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid1d>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheoryConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<CounterexampleConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default = "default_c0")]
    pub c0: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
    /// Exponent for the terminal check `ᾱ_T ≤ T^{-c2}`; defaults to `c1 / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c2: Option<f64>,
}

pub fn default_c0() -> f64 {
    2.0
}

pub fn default_c1() -> f64 {
    4.0
}

impl ScheduleConfig {
    pub fn c2(&self) -> f64 {
        self.c2.unwrap_or(self.c1 / 2.0)
    }

    pub fn build(&self) -> Result<Schedule, CliError> {
        Ok(Schedule::new(self.steps, self.c0, self.c1)?)
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        Self { steps, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub d: usize,
    pub components: Vec<ComponentConfig>,
    /// Treat `components` as a one-dimensional mixture replicated independently over `d` coordinates.
    #[serde(default)]
    pub product: bool,
}

impl TargetConfig {
    fn components(&self) -> Vec<Component> {
        self.components
            .iter()
            .map(|c| Component::new(c.weight, c.mean.clone(), c.variance))
            .collect()
    }

    pub fn build(&self) -> Result<Target, CliError> {
        if self.product {
            let factor = GaussianMixture::new(1, &self.components())?;
            Ok(ProductMixture::replicate(factor, self.d)?.into())
        } else {
            Ok(GaussianMixture::new(self.d, &self.components())?.into())
        }
    }

    /// The same target replicated over `d` coordinates; needs one-dimensional components.
    pub fn with_dim(&self, d: usize) -> Result<Self, CliError> {
        if !self.product && self.d != 1 {
            return Err(CliError::Validation(
                "a d-axis scan needs a one-dimensional or product target".into(),
            ));
        }
        Ok(Self {
            d,
            components: self.components.clone(),
            product: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKindName {
    Exact,
    ConstantShift,
    SmoothAdditive,
    FloorLattice,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreParams {
    /// `constant_shift`: the shift vector `c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<Vec<f64>>,
    /// `smooth_additive`: `ε`, `ω` and per-coordinate phases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<Vec<f64>>,
    /// `floor_lattice`: lattice width `L`, or the worst-case step error it is derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_error: Option<f64>,
    /// `floor_lattice`: injection step, default `⌈T/2⌉`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub kind: ScoreKindName,
    #[serde(default)]
    pub params: ScoreParams,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            kind: ScoreKindName::Exact,
            params: ScoreParams::default(),
        }
    }
}

pub const DEFAULT_LATTICE_ERROR: f64 = 1e-3;

impl ScoreConfig {
    fn check_only(&self, allowed: &[&str]) -> Result<(), CliError> {
        let p = &self.params;
        let given = [
            ("shift", p.shift.is_some()),
            ("amplitude", p.amplitude.is_some()),
            ("frequency", p.frequency.is_some()),
            ("phases", p.phases.is_some()),
            ("width", p.width.is_some()),
            ("max_error", p.max_error.is_some()),
            ("t0", p.t0.is_some()),
        ];
        for (name, present) in given {
            if present && !allowed.contains(&name) {
                return Err(CliError::Validation(format!(
                    "score.params.{name} does not apply to kind {:?}",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    /// Injection step for the lattice field.
    pub fn t0(&self, steps: usize) -> usize {
        self.params.t0.unwrap_or(steps.div_ceil(2))
    }

    pub fn max_error(&self) -> f64 {
        self.params.max_error.unwrap_or(DEFAULT_LATTICE_ERROR)
    }

    pub fn build(&self, schedule: &Schedule, dim: usize) -> Result<ScoreKind, CliError> {
        let p = &self.params;
        let missing = |name: &str| CliError::Validation(format!("score.params.{name} is required for {:?}", self.kind));
        match self.kind {
            ScoreKindName::Exact => {
                self.check_only(&[])?;
                Ok(ScoreKind::Exact)
            }
            ScoreKindName::ConstantShift => {
                self.check_only(&["shift"])?;
                Ok(ScoreKind::ConstantShift {
                    shift: p.shift.clone().ok_or_else(|| missing("shift"))?,
                })
            }
            ScoreKindName::SmoothAdditive => {
                self.check_only(&["amplitude", "frequency", "phases"])?;
                Ok(ScoreKind::SmoothAdditive {
                    amplitude: p.amplitude.ok_or_else(|| missing("amplitude"))?,
                    frequency: p.frequency.ok_or_else(|| missing("frequency"))?,
                    phases: p.phases.clone().unwrap_or_else(|| vec![0.0; dim]),
                })
            }
            ScoreKindName::FloorLattice => {
                self.check_only(&["width", "max_error", "t0"])?;
                if p.width.is_some() && p.max_error.is_some() {
                    return Err(CliError::Validation(
                        "give either score.params.width or score.params.max_error, not both".into(),
                    ));
                }
                let step = self.t0(schedule.steps());
                if !(2..=schedule.steps()).contains(&step) {
                    return Err(CliError::Validation(format!(
                        "t0 = {step} outside 2..={}",
                        schedule.steps()
                    )));
                }
                let width = match p.width {
                    Some(w) => w,
                    None => {
                        let e = self.max_error();
                        if !(e.is_finite() && e > 0.0) {
                            return Err(CliError::Validation(format!("max_error = {e}")));
                        }
                        lattice_width_for_error(schedule, step, e)
                    }
                };
                Ok(ScoreKind::FloorLattice { width, step })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub with_density: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
    /// Draws per step for the score-error functionals.
    #[serde(default = "default_error_samples")]
    pub error_samples: usize,
}

fn default_n_samples() -> usize {
    20_000
}

fn default_seed() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

fn default_error_samples() -> usize {
    200
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_samples: default_n_samples(),
            seed: default_seed(),
            with_density: true,
            output_path: None,
            error_samples: default_error_samples(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanAxis {
    #[serde(rename = "T")]
    Steps,
    #[serde(rename = "d")]
    Dim,
    #[serde(rename = "epsilon")]
    Epsilon,
}

impl ScanAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScanAxis::Steps => "T",
            ScanAxis::Dim => "d",
            ScanAxis::Epsilon => "epsilon",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub axis: ScanAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(default = "default_theory_n_mc")]
    pub n_mc: usize,
    #[serde(default = "default_c6")]
    pub c6: f64,
    /// Probe points per check.
    #[serde(default = "default_probes")]
    pub probes: usize,
    /// Signal-to-noise levels `s` for the localization identity; `h = h_rel · s`.
    #[serde(default = "default_localization_s")]
    pub localization_s: Vec<f64>,
    #[serde(default = "default_h_rel")]
    pub h_rel: f64,
}

fn default_theory_n_mc() -> usize {
    100_000
}

fn default_c6() -> f64 {
    DEFAULT_C6
}

fn default_probes() -> usize {
    10
}

fn default_localization_s() -> Vec<f64> {
    vec![0.5, 2.0]
}

fn default_h_rel() -> f64 {
    1e-4
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            n_mc: default_theory_n_mc(),
            c6: default_c6(),
            probes: default_probes(),
            localization_s: default_localization_s(),
            h_rel: default_h_rel(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleConfig {
    /// Histogram bin width as a fraction of `L`.
    #[serde(default = "default_bin_fraction")]
    pub bin_fraction: f64,
    /// Draws for the measured step error at `t0`.
    #[serde(default = "default_error_draws")]
    pub error_samples: usize,
}

fn default_bin_fraction() -> f64 {
    0.25
}

fn default_error_draws() -> usize {
    10_000
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        Self {
            bin_fraction: default_bin_fraction(),
            error_samples: default_error_draws(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<(), CliError> {
        let schedule = self.schedule.build()?;
        if let Some(c2) = self.schedule.c2 {
            if !(c2.is_finite() && c2 > 0.0) {
                return Err(CliError::Validation(format!("schedule.c2 = {c2}")));
            }
        }
        let target = self.target.build()?;
        self.score.build(&schedule, target.dim())?;
        if self.score.kind == ScoreKindName::FloorLattice && target.dim() != 1 {
            return Err(CliError::Validation("floor_lattice requires d = 1".into()));
        }
        if self.run.n_samples == 0 {
            return Err(CliError::Validation("run.n_samples must be positive".into()));
        }
        if self.run.error_samples == 0 {
            return Err(CliError::Validation("run.error_samples must be positive".into()));
        }
        if let Some(scan) = &self.scan {
            if scan.values.len() < 4 {
                return Err(CliError::Validation("scan needs at least 4 values".into()));
            }
            if scan.values.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(CliError::Validation("scan values must be strictly increasing".into()));
            }
            for &v in &scan.values {
                let ok = match scan.axis {
                    ScanAxis::Steps | ScanAxis::Dim => v >= 1.0 && v.fract() == 0.0,
                    ScanAxis::Epsilon => v.is_finite() && v >= 0.0,
                };
                if !ok {
                    return Err(CliError::Validation(format!("invalid {} value {v}", scan.axis.as_str())));
                }
            }
            if scan.axis == ScanAxis::Dim {
                self.target.with_dim(1)?;
            }
        }
        if let Some(th) = &self.theory {
            if th.n_mc == 0 {
                return Err(CliError::Validation("theory.n_mc must be positive".into()));
            }
            if th.probes == 0 {
                return Err(CliError::Validation("theory.probes must be positive".into()));
            }
            if !(th.c6.is_finite() && th.c6 > 0.0) {
                return Err(CliError::Validation(format!("theory.c6 = {}", th.c6)));
            }
            if !(th.h_rel > 0.0 && th.h_rel < 0.5) || th.localization_s.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(CliError::Validation("theory.localization_s must be positive and 0 < h_rel < 0.5".into()));
            }
        }
        if let Some(ce) = &self.counterexample {
            if !(ce.bin_fraction > 0.0 && ce.bin_fraction.is_finite()) || ce.error_samples == 0 {
                return Err(CliError::Validation("counterexample block out of range".into()));
            }
        }
        Ok(())
    }

    /// Canonical TOML of the resolved configuration.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.resolved_toml().as_bytes()))
    }

    pub fn schedule_arc(&self) -> Result<Arc<Schedule>, CliError> {
        Ok(Arc::new(self.schedule.build()?))
    }

    pub fn family(&self) -> Result<Arc<MarginalFamily>, CliError> {
        Ok(Arc::new(MarginalFamily::new(self.target.build()?, self.schedule_arc()?)))
    }

    pub fn grid(&self) -> Grid1d {
        self.grid.unwrap_or_default()
    }

    pub fn theory(&self) -> TheoryConfig {
        self.theory.clone().unwrap_or_default()
    }

    pub fn counterexample(&self) -> CounterexampleConfig {
        self.counterexample.clone().unwrap_or_default()
    }
}
