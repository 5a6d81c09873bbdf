//! Numerical checks of the analytic facts behind the convergence bound.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::rng::{derived_rng, domain};
use crate::schedule::{NoiseLevel, Schedule};
use crate::stats::Welford;
use crate::target::Target;

/// Threshold on the entrywise residual of the Jacobian identity.
pub const JACOBIAN_IDENTITY_TOL: f64 = 1e-8;
/// Constant in `Σ_t (1-α_t)/(1-ᾱ_t) Tr E[Σ_t²] ≤ 34 c1 d ln T`.
pub const COVARIANCE_SUM_CONSTANT: f64 = 34.0;
/// Constant in `Σ_t E‖∂φ*_t/∂x - I‖_F² ≤ 76 c1² d (ln T)² / T`.
pub const FROBENIUS_SUM_CONSTANT: f64 = 76.0;
pub const DEFAULT_C6: f64 = 10.0;
/// Posterior moment constants for `k = 1, 2, 3, 4`.
pub const MOMENT_CONSTANTS: [f64; 4] = [12.0, 120.0, 1040.0, 10080.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryEntry {
    pub check_id: String,
    pub steps: usize,
    pub dim: usize,
    pub measured: f64,
    pub std_error: f64,
    pub bound: f64,
    /// `measured / bound`, or the normalized quantity when the bound is on a ratio.
    pub ratio: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub entries: Vec<TheoryEntry>,
}

impl TheoryReport {
    pub fn push(&mut self, entry: TheoryEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = TheoryEntry>) {
        self.entries.extend(entries);
    }

    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }
}

fn check_step(schedule: &Schedule, t: usize) -> Result<(), MetricError> {
    if (1..=schedule.steps()).contains(&t) {
        Ok(())
    } else {
        Err(MetricError::BadArgument(format!("step {t} outside 1..={}", schedule.steps())))
    }
}

fn check_probes(target: &Target, probes: &[Vec<f64>]) -> Result<(), MetricError> {
    if probes.is_empty() {
        return Err(MetricError::BadArgument("no probe points".into()));
    }
    if let Some(p) = probes.iter().find(|p| p.len() != target.dim()) {
        return Err(MetricError::BadArgument(format!(
            "probe of dimension {}, target has {}",
            p.len(),
            target.dim()
        )));
    }
    Ok(())
}

/// `-(1-ᾱ_t) ∇² ln q_t(x)` against `I - Σ_ᾱt(x)`; max entrywise residual over probes.
pub fn check_jacobian_identity(
    target: &Target,
    schedule: &Schedule,
    t: usize,
    probes: &[Vec<f64>],
) -> Result<TheoryEntry, MetricError> {
    check_step(schedule, t)?;
    check_probes(target, probes)?;
    let level = schedule.noise_level(t);
    let q_t = target.marginal(level);
    let d = target.dim();
    let residual = probes
        .iter()
        .map(|x| {
            let left = q_t.hessian(x) * -level.one_minus();
            let right = DMatrix::identity(d, d) - target.posterior_covariance(level, x);
            (left - right).amax()
        })
        .fold(0.0, f64::max);
    Ok(TheoryEntry {
        check_id: "jacobian_identity".into(),
        steps: schedule.steps(),
        dim: d,
        measured: residual,
        std_error: 0.0,
        bound: JACOBIAN_IDENTITY_TOL,
        ratio: residual / JACOBIAN_IDENTITY_TOL,
        tolerance: 0.0,
        pass: residual <= JACOBIAN_IDENTITY_TOL,
        theta: None,
    })
}

/// Draws `(X₀, Z)` once per path and returns `Σ_t f(t, level, x_t)` per path.
fn path_sums<F>(target: &Target, schedule: &Schedule, n_mc: usize, seed: u64, tag: u64, f: F) -> Welford
where
    F: Fn(usize, NoiseLevel, &[f64]) -> f64 + Sync,
{
    let d = target.dim();
    let sums: Vec<f64> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, tag, 0, i as u64);
            let x0 = target.sample(&mut rng);
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let mut x = vec![0.0; d];
            let mut total = 0.0;
            for t in 2..=schedule.steps() {
                let level = schedule.noise_level(t);
                let (sa, sb) = (level.alpha_bar().sqrt(), level.one_minus().sqrt());
                for ((xj, a), b) in x.iter_mut().zip(&x0).zip(&z) {
                    *xj = sa * a + sb * b;
                }
                total += f(t, level, &x);
            }
            total
        })
        .collect();
    sums.into_iter().collect()
}

fn is_gaussian(target: &Target) -> bool {
    match target {
        Target::Mixture(g) => g.n_components() == 1,
        Target::Product(p) => p.factors().iter().all(|f| f.n_components() == 1),
    }
}

/// `S = Σ_{t=2..T} (1-α_t)/(1-ᾱ_t) · Tr E[Σ_ᾱt(X_t)²]` and `S / (d ln T)` against `34 c1`.
///
/// Each Monte-Carlo path reuses one `(X₀, Z)` for all steps. For a single
/// Gaussian `Σ_ᾱ` does not depend on `x`, so one path is exact.
pub fn check_covariance_sum(
    target: &Target,
    schedule: &Schedule,
    n_mc: usize,
    seed: u64,
) -> Result<TheoryEntry, MetricError> {
    if n_mc == 0 {
        return Err(MetricError::EmptyBatch);
    }
    let n = if is_gaussian(target) { 1 } else { n_mc };
    let acc = path_sums(target, schedule, n, seed, domain::COVARIANCE_SUM, |t, level, x| {
        schedule.beta(t) / level.one_minus() * target.posterior(level, x).noise_covariance_trace_sq()
    });
    let d = target.dim() as f64;
    let norm = d * (schedule.steps() as f64).ln();
    let bound = COVARIANCE_SUM_CONSTANT * schedule.c1();
    let ratio = acc.mean() / norm;
    let ratio_se = acc.std_error() / norm;
    Ok(TheoryEntry {
        check_id: "covariance_sum".into(),
        steps: schedule.steps(),
        dim: target.dim(),
        measured: acc.mean(),
        std_error: acc.std_error(),
        bound,
        ratio,
        tolerance: 3.0 * ratio_se,
        pass: ratio - 3.0 * ratio_se <= bound,
        theta: None,
    })
}

/// `d Σ_t (1-α_t) s_t² / (1-ᾱ_t)` with `s_t = ᾱ_t v / (ᾱ_t v + 1 - ᾱ_t)`: the covariance sum of `N(μ, v I)`.
pub fn covariance_sum_gaussian(schedule: &Schedule, dim: usize, variance: f64) -> f64 {
    (2..=schedule.steps())
        .map(|t| {
            let level = schedule.noise_level(t);
            let a = level.alpha_bar();
            let shrink = a * variance / (a * variance + level.one_minus());
            schedule.beta(t) * shrink * shrink / level.one_minus()
        })
        .sum::<f64>()
        * dim as f64
}

/// `Σ_{t=2..T} E‖(1-α_t)/2 · ∇² ln q_t(X_t)‖_F²`, normalized by `d (ln T)² / T`.
pub fn check_frobenius_sum(
    target: &Target,
    schedule: &Schedule,
    n_mc: usize,
    seed: u64,
) -> Result<TheoryEntry, MetricError> {
    if n_mc == 0 {
        return Err(MetricError::EmptyBatch);
    }
    let n = if is_gaussian(target) { 1 } else { n_mc };
    let marginals: Vec<Target> = (1..=schedule.steps())
        .map(|t| target.marginal(schedule.noise_level(t)))
        .collect();
    let acc = path_sums(target, schedule, n, seed, domain::FROBENIUS_SUM, |t, _, x| {
        let half = 0.5 * schedule.beta(t);
        half * half * marginals[t - 1].hessian_frobenius_sq(x)
    });
    let steps = schedule.steps() as f64;
    let norm = target.dim() as f64 * steps.ln().powi(2) / steps;
    let bound = FROBENIUS_SUM_CONSTANT * schedule.c1() * schedule.c1();
    let ratio = acc.mean() / norm;
    let ratio_se = acc.std_error() / norm;
    Ok(TheoryEntry {
        check_id: "frobenius_sum".into(),
        steps: schedule.steps(),
        dim: target.dim(),
        measured: acc.mean(),
        std_error: acc.std_error(),
        bound,
        ratio,
        tolerance: 3.0 * ratio_se,
        pass: ratio - 3.0 * ratio_se <= bound,
        theta: None,
    })
}

/// Frobenius sum of `N(μ, v I)`, where `‖∇² ln q_t‖_F² = d / (ᾱ_t v + 1 - ᾱ_t)²`.
pub fn frobenius_sum_gaussian(schedule: &Schedule, dim: usize, variance: f64) -> f64 {
    (2..=schedule.steps())
        .map(|t| {
            let level = schedule.noise_level(t);
            let total = level.alpha_bar() * variance + level.one_minus();
            let half = 0.5 * schedule.beta(t);
            half * half / (total * total)
        })
        .sum::<f64>()
        * dim as f64
}

/// `θ_t(y) = max{-ln q_t(y) / (d ln T), c6}`.
pub fn theta(target: &Target, schedule: &Schedule, t: usize, y: &[f64], c6: f64) -> f64 {
    let q_t = target.marginal(schedule.noise_level(t));
    let d = target.dim() as f64;
    let raw = -q_t.log_density(y) / (d * (schedule.steps() as f64).ln());
    raw.max(c6)
}

/// Monte-Carlo `E[‖√ᾱ_t X₀ - y‖^k | X_t = y]`, `k = 1..4`, against the
/// posterior moment bounds; one entry per probe and moment.
#[allow(clippy::too_many_arguments)]
pub fn check_posterior_moments(
    target: &Target,
    schedule: &Schedule,
    t: usize,
    probes: &[Vec<f64>],
    n_mc: usize,
    seed: u64,
    c6: f64,
) -> Result<Vec<TheoryEntry>, MetricError> {
    check_step(schedule, t)?;
    check_probes(target, probes)?;
    if n_mc == 0 {
        return Err(MetricError::EmptyBatch);
    }
    if !(c6.is_finite() && c6 > 0.0) {
        return Err(MetricError::BadArgument(format!("c6 = {c6}")));
    }
    let level = schedule.noise_level(t);
    let sa = level.alpha_bar().sqrt();
    let d = target.dim();
    let ln_t = (schedule.steps() as f64).ln();
    let mut out = Vec::with_capacity(4 * probes.len());
    for (p, y) in probes.iter().enumerate() {
        let th = theta(target, schedule, t, y, c6);
        let post = target.posterior(level, y);
        let norms: Vec<f64> = (0..n_mc)
            .into_par_iter()
            .map(|i| {
                let mut rng = derived_rng(seed, domain::POSTERIOR_MOMENTS, p as u64, i as u64);
                let x0 = post.sample(&mut rng);
                x0.iter()
                    .zip(y)
                    .map(|(a, b)| (sa * a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let base = th * d as f64 * level.one_minus() * ln_t;
        for (k, constant) in MOMENT_CONSTANTS.iter().enumerate() {
            let power = (k + 1) as i32;
            let acc: Welford = norms.iter().map(|r| r.powi(power)).collect();
            let bound = constant * base.powf(power as f64 / 2.0);
            out.push(TheoryEntry {
                check_id: format!("posterior_moment_{}", k + 1),
                steps: schedule.steps(),
                dim: d,
                measured: acc.mean(),
                std_error: acc.std_error(),
                bound,
                ratio: acc.mean() / bound,
                tolerance: 3.0 * acc.std_error(),
                pass: acc.mean() - 3.0 * acc.std_error() <= bound,
                theta: Some(th),
            });
        }
    }
    Ok(out)
}

/// `A_s(x) = Cov(X₀ | s X₀ + √s Z = x)`.
pub fn localization_covariance(target: &Target, s: f64, x: &[f64]) -> DMatrix<f64> {
    let level = NoiseLevel::new(s / (1.0 + s)).expect("s > 0");
    let scale = 1.0 / (s * (1.0 + s)).sqrt();
    let y: Vec<f64> = x.iter().map(|v| v * scale).collect();
    target.posterior(level, &y).x0_covariance()
}

/// Checks `d/ds E[A_s] = -E[A_s²]` entrywise.
///
/// The derivative is a Richardson-extrapolated central difference with steps
/// `h` and `h/2`, all evaluated on common draws `(X₀, Z)` with
/// `x_u = u X₀ + √u Z`. Passes when every entry's residual is within three
/// standard errors plus the difference between the two central differences.
pub fn check_localization_identity(
    target: &Target,
    s: f64,
    h: f64,
    n_mc: usize,
    seed: u64,
) -> Result<TheoryEntry, MetricError> {
    if !(s.is_finite() && s > 0.0 && h.is_finite() && h > 0.0 && h < s) {
        return Err(MetricError::BadArgument(format!("need 0 < h < s, got s = {s}, h = {h}")));
    }
    if n_mc == 0 {
        return Err(MetricError::EmptyBatch);
    }
    let d = target.dim();
    let n = if is_gaussian(target) { 1 } else { n_mc };
    let at = |u: f64, x0: &[f64], z: &[f64]| {
        let su = u.sqrt();
        let x: Vec<f64> = x0.iter().zip(z).map(|(a, b)| u * a + su * b).collect();
        localization_covariance(target, u, &x)
    };
    // Per draw: residual of the extrapolated derivative, and the h vs h/2 gap.
    let draws: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, domain::LOCALIZATION, 0, i as u64);
            let x0 = target.sample(&mut rng);
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let central = |step: f64| (at(s + step, &x0, &z) - at(s - step, &x0, &z)) / (2.0 * step);
            let wide = central(h);
            let narrow = central(0.5 * h);
            let derivative = (&narrow * 4.0 - &wide) / 3.0;
            let a = at(s, &x0, &z);
            (derivative + &a * &a, narrow - wide)
        })
        .collect();
    let mut worst = 0.0f64;
    let mut worst_se = 0.0;
    let mut worst_tol = 0.0;
    let mut pass = true;
    let mut worst_excess = f64::NEG_INFINITY;
    for r in 0..d {
        for c in 0..d {
            let res: Welford = draws.iter().map(|(m, _)| m[(r, c)]).collect();
            let gap: Welford = draws.iter().map(|(_, g)| g[(r, c)]).collect();
            let tol = 3.0 * res.std_error() + gap.mean().abs();
            let excess = res.mean().abs() - tol;
            pass &= excess <= 0.0;
            if excess > worst_excess {
                worst_excess = excess;
                worst = res.mean().abs();
                worst_se = res.std_error();
                worst_tol = tol;
            }
        }
    }
    Ok(TheoryEntry {
        check_id: "localization_identity".into(),
        steps: 0,
        dim: d,
        measured: worst,
        std_error: worst_se,
        bound: worst_tol,
        ratio: if worst_tol > 0.0 { worst / worst_tol } else { 0.0 },
        tolerance: worst_tol,
        pass,
        theta: None,
    })
}
