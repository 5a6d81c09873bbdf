//! The deterministic reverse sampler
//!
//! `Y_T ~ N(0, I)`, `Y_{t-1} = Φ_t(Y_t)` with
//! `Φ_t(x) = (x + (1 - α_t)/2 · s_t(x)) / √α_t`, run down to `Y_1`.
//! With density transport enabled, `ln p_1(Y_1)` is tracked through the
//! change-of-variables formula using one LU log-determinant per step.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{SamplerError, ScoreError};
use crate::rng::{derived_rng, domain};
use crate::score_models::ScoreModel;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `Φ_t(x)`.
pub fn phi_map<F: ScoreModel>(field: &F, t: usize, x: &[f64]) -> Result<Vec<f64>, ScoreError> {
    check_step(field, t)?;
    let mut score = vec![0.0; field.dim()];
    field.eval_into(t, x, &mut score, None);
    let s = field.schedule();
    let (beta, sqrt_alpha) = (s.beta(t), s.alpha(t).sqrt());
    Ok(x.iter()
        .zip(&score)
        .map(|(xi, si)| (xi + 0.5 * beta * si) / sqrt_alpha)
        .collect())
}

/// `∂Φ_t/∂x = (I + (1 - α_t)/2 · J_{s_t}(x)) / √α_t`.
pub fn jac_phi<F: ScoreModel>(field: &F, t: usize, x: &[f64]) -> Result<DMatrix<f64>, ScoreError> {
    check_step(field, t)?;
    let d = field.dim();
    let mut score = vec![0.0; d];
    let mut jac = DMatrix::zeros(d, d);
    field.eval_into(t, x, &mut score, Some(&mut jac));
    let s = field.schedule();
    to_map_jacobian(&mut jac, s.beta(t), s.alpha(t).sqrt());
    Ok(jac)
}

fn check_step<F: ScoreModel>(field: &F, t: usize) -> Result<(), ScoreError> {
    let steps = field.schedule().steps();
    if (1..=steps).contains(&t) {
        Ok(())
    } else {
        Err(ScoreError::StepOutOfRange { step: t, steps })
    }
}

/// Turns a score Jacobian into the map Jacobian in place; returns the
/// rounding scale of the sum, used to decide numerical singularity.
fn to_map_jacobian(jac: &mut DMatrix<f64>, beta: f64, sqrt_alpha: f64) -> f64 {
    let half = 0.5 * beta;
    let mut largest = 0.0f64;
    for v in jac.iter_mut() {
        largest = largest.max(v.abs());
        *v *= half;
    }
    for i in 0..jac.nrows() {
        jac[(i, i)] += 1.0;
    }
    *jac /= sqrt_alpha;
    (1.0 + half * largest) / sqrt_alpha
}

/// `ln det(m)` for a matrix whose determinant must be strictly positive.
///
/// Fails with the determinant when it is non-positive, non-finite, or when a
/// pivot is below the rounding level `scale` of the entries that produced it.
fn log_det_positive(m: &DMatrix<f64>, scale: f64) -> Result<f64, f64> {
    let d = m.nrows();
    let tol = 8.0 * d as f64 * f64::EPSILON * scale;
    let is_diagonal = d == 1 || (0..d).all(|r| (0..d).all(|c| r == c || m[(r, c)] == 0.0));
    if is_diagonal {
        let mut log_det = 0.0;
        let mut det = 1.0;
        for i in 0..d {
            let p = m[(i, i)];
            det *= p;
            if !(p.is_finite() && p > tol) {
                return Err(if p.abs() <= tol { 0.0 } else { det });
            }
            log_det += p.ln();
        }
        return Ok(log_det);
    }
    let lu = m.clone().lu();
    let u = lu.u();
    let mut log_abs = 0.0;
    let mut negative = lu.p().determinant::<f64>() < 0.0;
    for i in 0..d {
        let p = u[(i, i)];
        if !p.is_finite() || p.abs() <= tol {
            return Err(if p.is_finite() { 0.0 } else { p });
        }
        negative ^= p < 0.0;
        log_abs += p.abs().ln();
    }
    if negative {
        return Err(-log_abs.exp());
    }
    if !log_abs.is_finite() {
        return Err(f64::NAN);
    }
    Ok(log_abs)
}

/// `ln N(y; 0, I)`.
pub fn standard_normal_log_density(y: &[f64]) -> f64 {
    -0.5 * (y.len() as f64 * LN_2PI + y.iter().map(|v| v * v).sum::<f64>())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub with_density: bool,
    /// Keep every iterate and per-step log-determinant.
    pub keep_path: bool,
    /// Also record the iterate `Y_{probe}`.
    pub probe_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `y_T, …, y_1` when the path is kept, otherwise just `[y_T, y_1]`.
    pub points: Vec<Vec<f64>>,
    /// `ln det ∂Φ_t/∂x (y_t)` for `t = T, …, 2`, when both density and path are kept.
    pub step_logdets: Option<Vec<f64>>,
    /// `ln p_1(y_1)` of the sampler law.
    pub log_p1: Option<f64>,
    pub probe: Option<Vec<f64>>,
    pub checksum: u64,
}

impl Trajectory {
    pub fn start(&self) -> &[f64] {
        &self.points[0]
    }

    pub fn end(&self) -> &[f64] {
        self.points.last().expect("trajectory has points")
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn feed(&mut self, values: &[f64]) {
        for v in values {
            for b in v.to_bits().to_le_bytes() {
                self.0 ^= b as u64;
                self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
}

/// Runs `y_T → y_1` and records the full path.
pub fn run_trajectory<F: ScoreModel>(
    field: &F,
    y_start: &[f64],
    with_density: bool,
) -> Result<Trajectory, SamplerError> {
    run_with(
        field,
        y_start,
        RunOptions {
            with_density,
            keep_path: true,
            probe_step: None,
        },
    )
}

pub fn run_with<F: ScoreModel>(
    field: &F,
    y_start: &[f64],
    opts: RunOptions,
) -> Result<Trajectory, SamplerError> {
    let d = field.dim();
    if y_start.len() != d {
        return Err(SamplerError::DimensionMismatch {
            got: y_start.len(),
            expected: d,
        });
    }
    let schedule = field.schedule();
    let steps = schedule.steps();

    let mut y = y_start.to_vec();
    let mut score = vec![0.0; d];
    let mut jac = DMatrix::zeros(d, d);
    let mut hash = Fnv::new();
    hash.feed(&y);

    let mut points = vec![y.clone()];
    let mut logdets = Vec::new();
    let mut total_logdet = 0.0;
    let mut probe = (opts.probe_step == Some(steps)).then(|| y.clone());

    for t in (2..=steps).rev() {
        let beta = schedule.beta(t);
        let sqrt_alpha = schedule.alpha(t).sqrt();
        if opts.with_density {
            field.eval_into(t, &y, &mut score, Some(&mut jac));
            let scale = to_map_jacobian(&mut jac, beta, sqrt_alpha);
            let ld = log_det_positive(&jac, scale).map_err(|det| SamplerError::DegenerateJacobian {
                index: None,
                step: t,
                det,
            })?;
            total_logdet += ld;
            if opts.keep_path {
                logdets.push(ld);
            }
        } else {
            field.eval_into(t, &y, &mut score, None);
        }
        for (yi, si) in y.iter_mut().zip(&score) {
            *yi = (*yi + 0.5 * beta * si) / sqrt_alpha;
        }
        hash.feed(&y);
        if opts.keep_path {
            points.push(y.clone());
        }
        if opts.probe_step == Some(t - 1) {
            probe = Some(y.clone());
        }
    }

    let log_p1 = opts
        .with_density
        .then(|| standard_normal_log_density(y_start) - total_logdet);
    if let Some(lp) = log_p1 {
        hash.feed(&[lp]);
    }
    if !opts.keep_path {
        points.push(y);
    }
    Ok(Trajectory {
        points,
        step_logdets: (opts.with_density && opts.keep_path).then_some(logdets),
        log_p1,
        probe,
        checksum: hash.0,
    })
}

/// Draw `index` of the `N(0, I)` initialization for `seed`.
pub fn initial_point(dim: usize, seed: u64, index: usize) -> Vec<f64> {
    let mut rng = derived_rng(seed, domain::SAMPLER_INIT, 0, index as u64);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample {
    pub index: usize,
    pub y1: Vec<f64>,
    pub log_p1: Option<f64>,
    pub probe: Option<Vec<f64>>,
    pub checksum: u64,
}

/// `n` independent trajectories from seeded `N(0, I)` starts.
pub fn sample_batch<F: ScoreModel>(
    field: &F,
    n: usize,
    seed: u64,
    with_density: bool,
) -> Result<Vec<BatchSample>, SamplerError> {
    sample_batch_with(
        field,
        n,
        seed,
        RunOptions {
            with_density,
            keep_path: false,
            probe_step: None,
        },
    )
}

/// Batch sampling with explicit options; `keep_path` is ignored.
pub fn sample_batch_with<F: ScoreModel>(
    field: &F,
    n: usize,
    seed: u64,
    opts: RunOptions,
) -> Result<Vec<BatchSample>, SamplerError> {
    if n == 0 {
        return Err(SamplerError::EmptyBatch);
    }
    let opts = RunOptions {
        keep_path: false,
        ..opts
    };
    let d = field.dim();
    let results: Vec<Result<BatchSample, SamplerError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let start = initial_point(d, seed, i);
            let mut traj = run_with(field, &start, opts).map_err(|e| match e {
                SamplerError::DegenerateJacobian { step, det, .. } => SamplerError::DegenerateJacobian {
                    index: Some(i),
                    step,
                    det,
                },
                other => other,
            })?;
            Ok(BatchSample {
                index: i,
                y1: traj.points.pop().expect("end point"),
                log_p1: traj.log_p1,
                probe: traj.probe,
                checksum: traj.checksum,
            })
        })
        .collect();
    results.into_iter().collect()
}
