//! Distances between the sampler law and the target marginal.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MetricError, SamplerError};
use crate::rng::{derived_rng, domain};
use crate::sampler::{run_with, BatchSample, RunOptions};
use crate::schedule::{NoiseLevel, Schedule};
use crate::score_models::ScoreModel;
use crate::stats::Welford;
use crate::target::{pick_component, std_normal_cdf, GaussianMixture, MarginalFamily, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvMethod {
    MonteCarlo,
    Grid1d,
    Histogram,
}

impl TvMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            TvMethod::MonteCarlo => "monte_carlo",
            TvMethod::Grid1d => "grid_1d",
            TvMethod::Histogram => "histogram",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
    pub method: TvMethod,
    /// Deterministic error allowance on top of `std_error`: quadrature and
    /// tail mass for the grid, expected sampling bias for the histogram.
    pub tolerance: f64,
}

/// `TV(q, p) = E_{y~p}[(1 - q(y)/p(y))₊]` from paired log-densities at draws of `p`.
pub fn tv_from_log_densities(log_q: &[f64], log_p: &[f64]) -> Result<TvEstimate, MetricError> {
    if log_q.is_empty() || log_q.len() != log_p.len() {
        return Err(MetricError::EmptyBatch);
    }
    let acc: Welford = log_q
        .iter()
        .zip(log_p)
        .map(|(lq, lp)| tv_term(lq - lp))
        .collect();
    Ok(TvEstimate {
        value: acc.mean().clamp(0.0, 1.0),
        std_error: acc.std_error(),
        n: log_q.len(),
        method: TvMethod::MonteCarlo,
        tolerance: 0.0,
    })
}

fn tv_term(log_ratio: f64) -> f64 {
    if log_ratio.is_nan() {
        return 1.0;
    }
    (-log_ratio.exp_m1()).max(0.0)
}

/// Monte-Carlo TV between `q_1` and the law of a transported batch.
pub fn tv_monte_carlo(family: &MarginalFamily, batch: &[BatchSample]) -> Result<TvEstimate, MetricError> {
    if batch.is_empty() {
        return Err(MetricError::EmptyBatch);
    }
    let q1 = family.at(1);
    let mut log_p = Vec::with_capacity(batch.len());
    for (i, b) in batch.iter().enumerate() {
        log_p.push(b.log_p1.ok_or(MetricError::MissingDensity(i))?);
    }
    let log_q: Vec<f64> = batch.par_iter().map(|b| q1.log_density(&b.y1)).collect();
    tv_from_log_densities(&log_q, &log_p)
}

/// Uniform grid of starting points `y_T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid1d {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
}

impl Default for Grid1d {
    fn default() -> Self {
        Self {
            lo: -8.0,
            hi: 8.0,
            n_points: 20_001,
        }
    }
}

impl Grid1d {
    fn validate(&self) -> Result<(), MetricError> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(MetricError::BadGrid(format!("need lo < hi, got [{}, {}]", self.lo, self.hi)));
        }
        if self.lo > -4.0 || self.hi < 4.0 {
            return Err(MetricError::BadGrid(format!(
                "[{}, {}] does not cover [-4, 4] of the N(0, 1) start",
                self.lo, self.hi
            )));
        }
        if self.n_points < 3 {
            return Err(MetricError::BadGrid(format!("need at least 3 points, got {}", self.n_points)));
        }
        Ok(())
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / (self.n_points - 1) as f64
    }
}

/// A start grid pushed through the sampler: `y_1` and `ln p_1(y_1)` per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTransport {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub log_p1: Vec<f64>,
}

impl GridTransport {
    /// `max |ln p_1 - ln q_1|` over mapped nodes inside `[lo, hi]`.
    pub fn max_log_error(&self, q1: &GaussianMixture, lo: f64, hi: f64) -> f64 {
        self.end
            .iter()
            .zip(&self.log_p1)
            .filter(|(y, _)| (lo..=hi).contains(*y))
            .map(|(y, lp)| (lp - q1.log_density(&[*y])).abs())
            .fold(0.0, f64::max)
    }
}

/// Transports every grid node, failing on a degenerate step or a non-monotone map.
pub fn map_grid_1d<F: ScoreModel>(field: &F, grid: Grid1d) -> Result<GridTransport, MetricError> {
    if field.dim() != 1 {
        return Err(MetricError::NotScalar(field.dim()));
    }
    grid.validate()?;
    let opts = RunOptions {
        with_density: true,
        keep_path: false,
        probe_step: None,
    };
    let runs: Vec<Result<(f64, f64), SamplerError>> = (0..grid.n_points)
        .into_par_iter()
        .map(|i| {
            let y = grid.node(i);
            run_with(field, &[y], opts)
                .map(|traj| (traj.end()[0], traj.log_p1.expect("density requested")))
                .map_err(|e| match e {
                    SamplerError::DegenerateJacobian { step, det, .. } => SamplerError::DegenerateJacobian {
                        index: Some(i),
                        step,
                        det,
                    },
                    other => other,
                })
        })
        .collect();
    let mut out = GridTransport {
        start: Vec::with_capacity(grid.n_points),
        end: Vec::with_capacity(grid.n_points),
        log_p1: Vec::with_capacity(grid.n_points),
    };
    for (i, r) in runs.into_iter().enumerate() {
        let (y1, lp) = r?;
        if let Some(&prev) = out.end.last() {
            if !(y1 > prev) {
                return Err(MetricError::NonMonotoneMap(i));
            }
        }
        out.start.push(grid.node(i));
        out.end.push(y1);
        out.log_p1.push(lp);
    }
    Ok(out)
}

fn trapezoid(xs: &[f64], fs: &[f64], stride: usize) -> f64 {
    let idx: Vec<usize> = (0..xs.len()).step_by(stride).collect();
    idx.windows(2)
        .map(|w| 0.5 * (xs[w[1]] - xs[w[0]]) * (fs[w[0]] + fs[w[1]]))
        .sum()
}

/// Deterministic one-dimensional TV by quadrature over the mapped grid.
pub fn tv_grid_1d<F: ScoreModel>(
    family: &MarginalFamily,
    field: &F,
    grid: Grid1d,
) -> Result<TvEstimate, MetricError> {
    let q1 = family
        .at(1)
        .as_scalar()
        .ok_or(MetricError::NotScalar(family.dim()))?;
    let mapped = map_grid_1d(field, grid)?;
    tv_from_transport(q1, &mapped, grid)
}

/// TV from an already transported grid.
pub fn tv_from_transport(
    q1: &GaussianMixture,
    mapped: &GridTransport,
    grid: Grid1d,
) -> Result<TvEstimate, MetricError> {
    let gaps: Vec<f64> = mapped
        .end
        .iter()
        .zip(&mapped.log_p1)
        .map(|(y, lp)| (q1.log_density(&[*y]).exp() - lp.exp()).abs())
        .collect();
    let fine = trapezoid(&mapped.end, &gaps, 1);
    let coarse = if (grid.n_points - 1).is_multiple_of(2) {
        trapezoid(&mapped.end, &gaps, 2)
    } else {
        fine
    };
    let first = mapped.end[0];
    let last = *mapped.end.last().expect("grid has points");
    let p_tail = std_normal_cdf(grid.lo) + std_normal_cdf(-grid.hi);
    let q_tail = q1.cdf(first) + q1.upper_tail(last);
    Ok(TvEstimate {
        value: (0.5 * fine).clamp(0.0, 1.0),
        std_error: 0.0,
        n: grid.n_points,
        method: TvMethod::Grid1d,
        tolerance: 0.5 * (fine - coarse).abs() / 3.0 + 0.5 * (p_tail + q_tail),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramBins {
    pub width: f64,
    #[serde(default)]
    pub origin: f64,
}

/// `∫_{lo}^{hi} q`, taking differences on the side of the smaller tail.
fn bin_mass(q: &GaussianMixture, lo: f64, hi: f64) -> f64 {
    let below = q.cdf(lo);
    if below > 0.5 {
        (q.upper_tail(lo) - q.upper_tail(hi)).max(0.0)
    } else {
        (q.cdf(hi) - below).max(0.0)
    }
}

/// `½ Σ_b |p̂_b - Q_b|` over all bins of a fixed-width partition of the line.
pub fn tv_histogram(
    samples: &[f64],
    family: &MarginalFamily,
    bins: HistogramBins,
) -> Result<TvEstimate, MetricError> {
    let q1 = family
        .at(1)
        .as_scalar()
        .ok_or(MetricError::NotScalar(family.dim()))?;
    tv_histogram_against(samples, q1, bins)
}

pub fn tv_histogram_against(
    samples: &[f64],
    q: &GaussianMixture,
    bins: HistogramBins,
) -> Result<TvEstimate, MetricError> {
    if samples.is_empty() {
        return Err(MetricError::EmptyBatch);
    }
    if !(bins.width.is_finite() && bins.width > 0.0 && bins.origin.is_finite()) {
        return Err(MetricError::BadArgument(format!("bin width {}", bins.width)));
    }
    let n = samples.len() as f64;
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &y in samples {
        if !y.is_finite() {
            return Err(MetricError::BadArgument(format!("non-finite sample {y}")));
        }
        *counts.entry(((y - bins.origin) / bins.width).floor() as i64).or_default() += 1;
    }
    let mut abs_gap = 0.0;
    let mut covered = 0.0;
    let mut signed_sq = 0.0;
    let mut signed = 0.0;
    for (&k, &c) in &counts {
        let lo = bins.origin + k as f64 * bins.width;
        let mass = bin_mass(q, lo, lo + bins.width);
        let p = c as f64 / n;
        abs_gap += (p - mass).abs();
        covered += mass;
        let sign = if p > mass { 1.0 } else { -1.0 };
        signed_sq += p;
        signed += sign * p;
    }
    let value = 0.5 * (abs_gap + (1.0 - covered).max(0.0));
    let std_error = 0.5 * ((signed_sq - signed * signed).max(0.0) / n).sqrt();
    Ok(TvEstimate {
        value: value.clamp(0.0, 1.0),
        std_error,
        n: samples.len(),
        method: TvMethod::Histogram,
        tolerance: histogram_sampling_bias(q, bins.width, samples.len()),
    })
}

/// Upper bound on `E[TV]` for `n` exact draws: `½ Σ_b √(Q_b/n) ≈ ½ ∫√q / √(n w)`.
pub fn histogram_sampling_bias(q: &GaussianMixture, width: f64, n: usize) -> f64 {
    let r = q.effective_radius() + 2.0;
    let m = 4001;
    let h = 2.0 * r / (m - 1) as f64;
    let root: Vec<f64> = (0..m)
        .map(|i| (0.5 * q.log_density(&[-r + h * i as f64])).exp())
        .collect();
    let integral = h * (root.iter().sum::<f64>() - 0.5 * (root[0] + root[m - 1]));
    (0.5 * integral / (n as f64 * width).sqrt()).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
}

/// `KL(q_T ‖ N(0, I))` by antithetic Monte Carlo over `x ~ q_T`.
///
/// Each draw is paired with its reflection (same component, negated Gaussian
/// noise), which removes the odd part of the log-ratio.
pub fn kl_terminal(target: &Target, schedule: &Schedule, n_mc: usize, seed: u64) -> Result<KlEstimate, MetricError> {
    if n_mc == 0 {
        return Err(MetricError::EmptyBatch);
    }
    let level = schedule.noise_level(schedule.steps());
    let q_t = target.marginal(level);
    // (pair mean, mean magnitude of the two halves)
    let terms: Vec<(f64, f64)> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, domain::KL_TERMINAL, 0, i as u64);
            let (x, mirror) = antithetic_pair(target, level, &mut rng);
            let (a, b) = (
                q_t.log_ratio_to_standard_normal(&x),
                q_t.log_ratio_to_standard_normal(&mirror),
            );
            (0.5 * (a + b), 0.5 * (a.abs() + b.abs()))
        })
        .collect();
    let acc: Welford = terms.iter().map(|t| t.0).collect();
    // The halves cancel; rounding is relative to their size, not the pair mean's.
    let scale = terms.iter().map(|t| t.1).sum::<f64>() / n_mc as f64;
    Ok(KlEstimate {
        value: acc.mean(),
        std_error: acc.std_error().max(4.0 * f64::EPSILON * scale),
        n: n_mc,
    })
}

/// `x = √ᾱ(μ + √v ζ) + √(1-ᾱ) w` and the same with `(ζ, w)` negated.
fn antithetic_pair<R: Rng + ?Sized>(target: &Target, level: NoiseLevel, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let (sa, sb) = (level.alpha_bar().sqrt(), level.one_minus().sqrt());
    let mut draw = |g: &GaussianMixture, x: &mut Vec<f64>, m: &mut Vec<f64>| {
        let i = pick_component(g.weights(), rng.random::<f64>());
        let sd = g.variance(i).sqrt();
        for &mu in g.mean(i) {
            let z: f64 = rng.sample(StandardNormal);
            let w: f64 = rng.sample(StandardNormal);
            let noise = sa * sd * z + sb * w;
            x.push(sa * mu + noise);
            m.push(sa * mu - noise);
        }
    };
    let mut x = Vec::with_capacity(target.dim());
    let mut mirror = Vec::with_capacity(target.dim());
    match target {
        Target::Mixture(g) => draw(g, &mut x, &mut mirror),
        Target::Product(p) => {
            for f in p.factors() {
                draw(f, &mut x, &mut mirror);
            }
        }
    }
    (x, mirror)
}
