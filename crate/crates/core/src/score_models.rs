//! Exact and deliberately corrupted score oracles, and the two score-error functionals.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ScoreError;
use crate::rng::{derived_rng, domain};
use crate::schedule::Schedule;
use crate::stats::Welford;
use crate::target::MarginalFamily;

/// Largest dimension for which dense spectral norms are computed.
pub const MAX_DENSE_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Exact,
    /// `s*_t(x) + c`.
    ConstantShift { shift: Vec<f64> },
    /// `s*_t(x) + ε sin(ω x_j + φ_j)` per coordinate.
    SmoothAdditive {
        amplitude: f64,
        frequency: f64,
        phases: Vec<f64>,
    },
    /// Exact everywhere except step `step`, where the update lands on `width · ℤ`.
    FloorLattice { width: f64, step: usize },
}

impl ScoreKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreKind::Exact => "exact",
            ScoreKind::ConstantShift { .. } => "constant_shift",
            ScoreKind::SmoothAdditive { .. } => "smooth_additive",
            ScoreKind::FloorLattice { .. } => "floor_lattice",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreField {
    kind: ScoreKind,
    family: Arc<MarginalFamily>,
}

impl ScoreField {
    pub fn new(kind: ScoreKind, family: Arc<MarginalFamily>) -> Result<Self, ScoreError> {
        let d = family.dim();
        let steps = family.steps();
        match &kind {
            ScoreKind::Exact => {}
            ScoreKind::ConstantShift { shift } => {
                if shift.len() != d {
                    return Err(ScoreError::ShiftLength {
                        got: shift.len(),
                        expected: d,
                    });
                }
            }
            ScoreKind::SmoothAdditive { phases, .. } => {
                if phases.len() != d {
                    return Err(ScoreError::PhaseLength {
                        got: phases.len(),
                        expected: d,
                    });
                }
            }
            ScoreKind::FloorLattice { width, step } => {
                if d != 1 {
                    return Err(ScoreError::LatticeDimension(d));
                }
                if !(2..=steps).contains(step) {
                    return Err(ScoreError::InjectionStep { step: *step, steps });
                }
                if !(*width > 0.0 && width.is_finite()) {
                    return Err(ScoreError::LatticeWidth(*width));
                }
            }
        }
        Ok(Self { kind, family })
    }

    pub fn exact(family: Arc<MarginalFamily>) -> Self {
        Self {
            kind: ScoreKind::Exact,
            family,
        }
    }

    pub fn kind(&self) -> &ScoreKind {
        &self.kind
    }

    pub fn family(&self) -> &MarginalFamily {
        &self.family
    }

    pub fn family_arc(&self) -> &Arc<MarginalFamily> {
        &self.family
    }

    pub fn schedule(&self) -> &Schedule {
        self.family.schedule()
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    fn check_step(&self, t: usize) -> Result<(), ScoreError> {
        let steps = self.family.steps();
        if (1..=steps).contains(&t) {
            Ok(())
        } else {
            Err(ScoreError::StepOutOfRange { step: t, steps })
        }
    }

    /// Score value and, if requested, its Jacobian at step `t`. `t` must be in range.
    pub(crate) fn eval_into(
        &self,
        t: usize,
        x: &[f64],
        score: &mut [f64],
        jac: Option<&mut DMatrix<f64>>,
    ) {
        let q = self.family.at(t);
        match jac {
            Some(jac) => {
                q.score_and_hessian_into(x, score, jac);
                self.add_perturbation(t, x, score, Some(jac));
            }
            None => {
                q.score_into(x, score);
                self.add_perturbation(t, x, score, None);
            }
        }
    }

    /// Adds `s_t - s*_t` (and its Jacobian) to exact values already in the buffers.
    fn add_perturbation(
        &self,
        t: usize,
        x: &[f64],
        score: &mut [f64],
        jac: Option<&mut DMatrix<f64>>,
    ) {
        match &self.kind {
            ScoreKind::Exact => {}
            ScoreKind::ConstantShift { shift } => {
                for (s, c) in score.iter_mut().zip(shift) {
                    *s += c;
                }
            }
            ScoreKind::SmoothAdditive {
                amplitude,
                frequency,
                phases,
            } => {
                for (s, (xi, phi)) in score.iter_mut().zip(x.iter().zip(phases)) {
                    *s += amplitude * (frequency * xi + phi).sin();
                }
                if let Some(jac) = jac {
                    for (j, (xi, phi)) in x.iter().zip(phases).enumerate() {
                        jac[(j, j)] += amplitude * frequency * (frequency * xi + phi).cos();
                    }
                }
            }
            ScoreKind::FloorLattice { width, step } => {
                if t != *step {
                    return;
                }
                // score[0] holds s*_t(x) here, jac[(0,0)] the exact Hessian.
                let (shift, slope) = self.lattice_terms(t, x[0], score[0], jac.as_deref().map(|j| j[(0, 0)]), *width);
                score[0] += shift;
                if let (Some(jac), Some(slope)) = (jac, slope) {
                    jac[(0, 0)] += slope;
                }
            }
        }
    }

    /// Score shift that sends the update to `L ⌊y*/L⌋`, and its derivative on a cell interior.
    fn lattice_terms(
        &self,
        t: usize,
        x: f64,
        exact_score: f64,
        exact_hessian: Option<f64>,
        width: f64,
    ) -> (f64, Option<f64>) {
        let schedule = self.schedule();
        let beta = schedule.beta(t);
        let sqrt_alpha = schedule.alpha(t).sqrt();
        let exact_next = (x + 0.5 * beta * exact_score) / sqrt_alpha;
        let residual = exact_next - width * (exact_next / width).floor();
        let gain = 2.0 * sqrt_alpha / beta;
        let slope = exact_hessian.map(|h| -gain * (1.0 + 0.5 * beta * h) / sqrt_alpha);
        (-gain * residual, slope)
    }

    pub fn eval_score(&self, t: usize, x: &[f64]) -> Result<Vec<f64>, ScoreError> {
        self.check_step(t)?;
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, x, &mut out, None);
        Ok(out)
    }

    pub fn eval_score_jacobian(&self, t: usize, x: &[f64]) -> Result<DMatrix<f64>, ScoreError> {
        self.check_step(t)?;
        let d = self.dim();
        let mut score = vec![0.0; d];
        let mut jac = DMatrix::zeros(d, d);
        self.eval_into(t, x, &mut score, Some(&mut jac));
        Ok(jac)
    }

    /// `s_t(x) - s*_t(x)`, computed from the perturbation itself rather than by subtraction.
    pub fn perturbation(&self, t: usize, x: &[f64]) -> Result<Vec<f64>, ScoreError> {
        self.check_step(t)?;
        let d = self.dim();
        Ok(match &self.kind {
            ScoreKind::Exact => vec![0.0; d],
            ScoreKind::ConstantShift { shift } => shift.clone(),
            ScoreKind::SmoothAdditive {
                amplitude,
                frequency,
                phases,
            } => x
                .iter()
                .zip(phases)
                .map(|(xi, phi)| amplitude * (frequency * xi + phi).sin())
                .collect(),
            ScoreKind::FloorLattice { width, step } => {
                if t != *step {
                    vec![0.0; d]
                } else {
                    let exact = self.family.at(t).score(x)[0];
                    vec![self.lattice_terms(t, x[0], exact, None, *width).0]
                }
            }
        })
    }

    /// `J_{s_t}(x) - J_{s*_t}(x)`.
    pub fn perturbation_jacobian(&self, t: usize, x: &[f64]) -> Result<DMatrix<f64>, ScoreError> {
        self.check_step(t)?;
        let d = self.dim();
        Ok(match &self.kind {
            ScoreKind::Exact | ScoreKind::ConstantShift { .. } => DMatrix::zeros(d, d),
            ScoreKind::SmoothAdditive {
                amplitude,
                frequency,
                phases,
            } => DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                d,
                x.iter()
                    .zip(phases)
                    .map(|(xi, phi)| amplitude * frequency * (frequency * xi + phi).cos()),
            )),
            ScoreKind::FloorLattice { width, step } => {
                let mut m = DMatrix::zeros(1, 1);
                if t == *step {
                    let q = self.family.at(t);
                    let exact = q.score(x)[0];
                    let hess = q.hessian(x)[(0, 0)];
                    m[(0, 0)] = self.lattice_terms(t, x[0], exact, Some(hess), *width).1.unwrap();
                }
                m
            }
        })
    }

    /// Additive shift applied at the injection step of a floor-lattice field (1-D).
    pub fn floor_perturbation(&self, x: f64) -> Result<f64, ScoreError> {
        match &self.kind {
            ScoreKind::FloorLattice { step, .. } => Ok(self.perturbation(*step, &[x])?[0]),
            other => Err(ScoreError::NotLattice(other.name())),
        }
    }
}

/// What the sampler needs from a score estimate.
pub trait ScoreModel: Sync {
    fn schedule(&self) -> &Schedule;
    fn dim(&self) -> usize;
    /// Writes `s_t(x)` into `score` and, when given, `J_{s_t}(x)` into `jac`.
    /// `t` is assumed to be in `1..=T`.
    fn eval_into(&self, t: usize, x: &[f64], score: &mut [f64], jac: Option<&mut DMatrix<f64>>);
}

impl ScoreModel for ScoreField {
    fn schedule(&self) -> &Schedule {
        ScoreField::schedule(self)
    }

    fn dim(&self) -> usize {
        ScoreField::dim(self)
    }

    fn eval_into(&self, t: usize, x: &[f64], score: &mut [f64], jac: Option<&mut DMatrix<f64>>) {
        ScoreField::eval_into(self, t, x, score, jac)
    }
}

/// Lattice width whose worst-case score shift at `step` equals `max_error`.
///
/// The shift is `(2√α/β)·r` with `0 ≤ r < L`, so `L = max_error · β / (2√α)`.
pub fn lattice_width_for_error(schedule: &Schedule, step: usize, max_error: f64) -> f64 {
    max_error * schedule.beta(step) / (2.0 * schedule.alpha(step).sqrt())
}

/// Largest singular value of a small dense matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64, ScoreError> {
    let d = m.nrows();
    if d > MAX_DENSE_DIM {
        return Err(ScoreError::DimensionTooLarge {
            got: d,
            max: MAX_DENSE_DIM,
        });
    }
    if d == 1 {
        return Ok(m[(0, 0)].abs());
    }
    let is_diagonal = (0..d).all(|r| (0..d).all(|c| r == c || m[(r, c)] == 0.0));
    if is_diagonal {
        return Ok((0..d).map(|i| m[(i, i)].abs()).fold(0.0, f64::max));
    }
    Ok(m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// `√((1/T) Σ_t E‖s_t - s*_t‖²)`.
    pub eps_score: f64,
    pub eps_score_std_error: f64,
    /// `(1/T) Σ_t E‖J_{s_t} - J_{s*_t}‖` with the spectral norm.
    pub eps_jacobi: f64,
    pub eps_jacobi_std_error: f64,
    /// Mean squared score error per step, index `t - 1`.
    pub per_t_score: Vec<f64>,
    /// Mean operator-norm Jacobian error per step, index `t - 1`.
    pub per_t_jacobi: Vec<f64>,
    pub n_mc: usize,
    pub seed: u64,
}

struct StepError {
    score: Welford,
    jacobi: Welford,
}

fn measure(
    field: &ScoreField,
    n_mc: usize,
    seed: u64,
    with_score: bool,
    with_jacobi: bool,
) -> Result<ErrorReport, ScoreError> {
    if n_mc == 0 {
        return Err(ScoreError::NoSamples);
    }
    if with_jacobi && field.dim() > MAX_DENSE_DIM {
        return Err(ScoreError::DimensionTooLarge {
            got: field.dim(),
            max: MAX_DENSE_DIM,
        });
    }
    let family = field.family();
    let steps = family.steps();
    let per_step: Vec<StepError> = (1..=steps)
        .into_par_iter()
        .map(|t| {
            let q = family.at(t);
            let samples: Result<Vec<(f64, f64)>, ScoreError> = (0..n_mc)
                .map(|i| {
                    let mut rng = derived_rng(seed, domain::SCORE_ERROR, t as u64, i as u64);
                    let x = q.sample(&mut rng);
                    let sq = if with_score {
                        field.perturbation(t, &x)?.iter().map(|e| e * e).sum()
                    } else {
                        0.0
                    };
                    let op = if with_jacobi {
                        spectral_norm(&field.perturbation_jacobian(t, &x)?)?
                    } else {
                        0.0
                    };
                    Ok((sq, op))
                })
                .collect();
            samples.map(|s| StepError {
                score: s.iter().map(|p| p.0).collect(),
                jacobi: s.iter().map(|p| p.1).collect(),
            })
        })
        .collect::<Result<_, _>>()?;

    let mut score_mean = Welford::new();
    let mut jacobi_mean = Welford::new();
    let mut score_var = 0.0;
    let mut jacobi_var = 0.0;
    for step in &per_step {
        score_mean.push(step.score.mean());
        jacobi_mean.push(step.jacobi.mean());
        score_var += step.score.std_error().powi(2);
        jacobi_var += step.jacobi.std_error().powi(2);
    }
    let horizon = steps as f64;
    let mean_sq = score_mean.mean();
    let eps_score = mean_sq.sqrt();
    let mean_sq_se = score_var.sqrt() / horizon;
    Ok(ErrorReport {
        eps_score,
        eps_score_std_error: if eps_score > 0.0 { mean_sq_se / (2.0 * eps_score) } else { 0.0 },
        eps_jacobi: jacobi_mean.mean(),
        eps_jacobi_std_error: jacobi_var.sqrt() / horizon,
        per_t_score: per_step.iter().map(|s| s.score.mean()).collect(),
        per_t_jacobi: per_step.iter().map(|s| s.jacobi.mean()).collect(),
        n_mc,
        seed,
    })
}

/// Monte-Carlo estimate of the ℓ₂ score error over all steps (Jacobian part left at zero).
pub fn measure_assumption1(field: &ScoreField, n_mc: usize, seed: u64) -> Result<ErrorReport, ScoreError> {
    measure(field, n_mc, seed, true, false)
}

/// Monte-Carlo estimate of the mean spectral-norm Jacobian error (score part left at zero).
pub fn measure_assumption2(field: &ScoreField, n_mc: usize, seed: u64) -> Result<ErrorReport, ScoreError> {
    measure(field, n_mc, seed, false, true)
}

/// Both error functionals from one set of draws.
pub fn measure_errors(field: &ScoreField, n_mc: usize, seed: u64) -> Result<ErrorReport, ScoreError> {
    measure(field, n_mc, seed, true, true)
}

/// Root-mean-square score error at a single step.
pub fn step_score_error(field: &ScoreField, t: usize, n_mc: usize, seed: u64) -> Result<(f64, f64), ScoreError> {
    if n_mc == 0 {
        return Err(ScoreError::NoSamples);
    }
    field.check_step(t)?;
    let q = field.family().at(t);
    let sq: Vec<f64> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, domain::SCORE_ERROR, t as u64, i as u64);
            let x = q.sample(&mut rng);
            field.perturbation(t, &x).map(|p| p.iter().map(|e| e * e).sum())
        })
        .collect::<Result<_, _>>()?;
    let w: Welford = sq.into_iter().collect();
    let rms = w.mean().sqrt();
    let se = if rms > 0.0 { w.std_error() / (2.0 * rms) } else { 0.0 };
    Ok((rms, se))
}
