//! Isotropic Gaussian-mixture targets and their forward marginals.
//!
//! For data `X₀ ~ Σ w_i N(μ_i, v_i I)` the forward marginal at level `ᾱ` is
//! again a mixture with means `√ᾱ μ_i` and variances `ᾱ v_i + 1 - ᾱ`, so the
//! score, its Jacobian and every posterior statistic of `X₀ | X_t` are closed
//! form. Product targets (independent coordinates, each a 1-D mixture) are
//! kept factorized so that high-dimensional runs cost `O(d)` per evaluation.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use statrs::function::erf::erfc;

use crate::error::TargetError;
use crate::rng::{derived_rng, domain};
use crate::schedule::{NoiseLevel, Schedule};

pub(crate) type Small = SmallVec<[f64; 8]>;
type SmallVecs = SmallVec<[f64; 32]>;

/// Responsibilities with log-weight below this are dropped.
pub const LOG_RESPONSIBILITY_FLOOR: f64 = -700.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl Component {
    pub fn new(weight: f64, mean: Vec<f64>, variance: f64) -> Self {
        Self {
            weight,
            mean,
            variance,
        }
    }
}

/// `c I + Σ_i w_i u_i u_iᵀ`, the shape shared by the score Jacobian and the
/// posterior covariances of an isotropic mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct IsoLowRank {
    dim: usize,
    diag: f64,
    weights: Small,
    vectors: SmallVecs,
}

impl IsoLowRank {
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Writes the dense matrix into `out`; the result is exactly symmetric.
    pub fn write_dense(&self, out: &mut DMatrix<f64>) {
        let d = self.dim;
        for r in 0..d {
            for c in r..d {
                let mut v = if r == c { self.diag } else { 0.0 };
                for (i, &w) in self.weights.iter().enumerate() {
                    let u = self.vector(i);
                    v += w * u[r] * u[c];
                }
                out[(r, c)] = v;
                out[(c, r)] = v;
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        self.write_dense(&mut out);
        out
    }

    pub fn trace(&self) -> f64 {
        let spread: f64 = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, &w)| w * dot(self.vector(i), self.vector(i)))
            .sum();
        self.dim as f64 * self.diag + spread
    }

    /// `Tr(M²)`, which equals `‖M‖_F²` for this symmetric shape.
    pub fn trace_sq(&self) -> f64 {
        let k = self.weights.len();
        let c = self.diag;
        let mut cross = 0.0;
        let mut spread = 0.0;
        for i in 0..k {
            let ui = self.vector(i);
            let wi = self.weights[i];
            spread += wi * dot(ui, ui);
            for j in 0..k {
                let g = dot(ui, self.vector(j));
                cross += wi * self.weights[j] * g * g;
            }
        }
        self.dim as f64 * c * c + 2.0 * c * spread + cross
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

pub(crate) fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn log_norms(dim: usize, log_weights: &[f64], variances: &[f64]) -> Vec<f64> {
    log_weights
        .iter()
        .zip(variances)
        .map(|(lw, v)| lw - 0.5 * dim as f64 * (LN_2PI + v.ln()))
        .collect()
}

/// Normalizes log terms in place into responsibilities, returning the log-sum.
fn normalize(terms: &mut Small) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        terms.iter_mut().for_each(|l| *l = 0.0);
        return max;
    }
    let mut sum = 0.0;
    for l in terms.iter_mut() {
        let shifted = *l - max;
        *l = if shifted < LOG_RESPONSIBILITY_FLOOR { 0.0 } else { shifted.exp() };
        sum += *l;
    }
    let log_sum = sum.ln();
    for l in terms.iter_mut() {
        *l /= sum;
    }
    max + log_sum
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    // variance - 1, carried separately so ratios against N(0, I) keep precision
    excess: Vec<f64>,
    // log w_i - d/2 ln(2π v_i)
    log_norms: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(dim: usize, components: &[Component]) -> Result<Self, TargetError> {
        if dim == 0 {
            return Err(TargetError::ZeroDimension);
        }
        if components.is_empty() {
            return Err(TargetError::Empty);
        }
        let mut total = 0.0;
        for (index, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(TargetError::MeanLength {
                    index,
                    got: c.mean.len(),
                    expected: dim,
                });
            }
            if !(c.variance > 0.0 && c.variance.is_finite()) {
                return Err(TargetError::BadVariance {
                    index,
                    variance: c.variance,
                });
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) || c.mean.iter().any(|m| !m.is_finite())
            {
                return Err(TargetError::BadWeight {
                    index,
                    weight: c.weight,
                });
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(TargetError::WeightSum(total));
        }
        let log_weights: Vec<f64> = components.iter().map(|c| c.weight.ln()).collect();
        let variances: Vec<f64> = components.iter().map(|c| c.variance).collect();
        Ok(Self {
            dim,
            weights: components.iter().map(|c| c.weight).collect(),
            log_norms: log_norms(dim, &log_weights, &variances),
            log_weights,
            means: components.iter().flat_map(|c| c.mean.iter().copied()).collect(),
            variances,
            excess: components.iter().map(|c| c.variance - 1.0).collect(),
        })
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], 1.0).expect("valid standard normal")
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self, TargetError> {
        Self::new(mean.len(), &[Component::new(1.0, mean, variance)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.dim..(i + 1) * self.dim]
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.variances[i]
    }

    pub fn components(&self) -> Vec<Component> {
        (0..self.n_components())
            .map(|i| Component::new(self.weights[i], self.mean(i).to_vec(), self.variances[i]))
            .collect()
    }

    /// Law of `√ᾱ X₀ + √(1-ᾱ) W`.
    pub fn marginal(&self, level: NoiseLevel) -> Self {
        let (a, b) = (level.alpha_bar(), level.one_minus());
        let scale = a.sqrt();
        let variances: Vec<f64> = self.variances.iter().map(|v| a * v + b).collect();
        Self {
            dim: self.dim,
            weights: self.weights.clone(),
            log_weights: self.log_weights.clone(),
            log_norms: log_norms(self.dim, &self.log_weights, &variances),
            means: self.means.iter().map(|m| scale * m).collect(),
            variances,
            excess: self.excess.iter().map(|e| a * e).collect(),
        }
    }

    fn check_dim(&self, x: &[f64]) {
        assert_eq!(x.len(), self.dim, "point dimension mismatch");
    }

    fn log_terms(&self, x: &[f64]) -> Small {
        self.check_dim(x);
        (0..self.n_components())
            .map(|i| {
                let v = self.variances[i];
                let sq: f64 = x
                    .iter()
                    .zip(self.mean(i))
                    .map(|(xi, mi)| (xi - mi) * (xi - mi))
                    .sum();
                self.log_norms[i] - 0.5 * sq / v
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.log_terms(x))
    }

    /// Responsibilities of each component at `x` and the log-density.
    pub fn responsibilities(&self, x: &[f64]) -> (Small, f64) {
        let mut terms = self.log_terms(x);
        let total = normalize(&mut terms);
        (terms, total)
    }

    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let (resp, _) = self.responsibilities(x);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &r) in resp.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            let v = self.variances[i];
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(self.mean(i)) {
                *o -= r * (xi - mi) / v;
            }
        }
    }

    /// `∇ log q(x)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.score_into(x, &mut out);
        out
    }

    /// Score and the structured Hessian `-Σ r_i/σ_i² I + Σ r_i (s_i - s)(s_i - s)ᵀ`.
    pub fn score_and_hessian_structure(&self, x: &[f64], score: &mut [f64]) -> IsoLowRank {
        let d = self.dim;
        let (resp, _) = self.responsibilities(x);
        let k = resp.len();
        let mut comp_scores: SmallVecs = SmallVec::from_elem(0.0, k * d);
        score.iter_mut().for_each(|s| *s = 0.0);
        let mut diag = 0.0;
        for i in 0..k {
            let v = self.variances[i];
            let mean = self.mean(i);
            for j in 0..d {
                let s = -(x[j] - mean[j]) / v;
                comp_scores[i * d + j] = s;
                score[j] += resp[i] * s;
            }
            diag -= resp[i] / v;
        }
        for i in 0..k {
            for j in 0..d {
                comp_scores[i * d + j] -= score[j];
            }
        }
        IsoLowRank {
            dim: d,
            diag,
            weights: resp,
            vectors: comp_scores,
        }
    }

    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut score = vec![0.0; self.dim];
        self.score_and_hessian_structure(x, &mut score).to_dense()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let i = pick_component(&self.weights, rng.random::<f64>());
        let sd = self.variances[i].sqrt();
        self.mean(i)
            .iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Posterior of `X₀` given `√ᾱ X₀ + √(1-ᾱ) Z = x`.
    pub fn posterior(&self, level: NoiseLevel, x: &[f64]) -> Posterior {
        self.check_dim(x);
        let (a, b) = (level.alpha_bar(), level.one_minus());
        let sa = a.sqrt();
        let d = self.dim;
        let k = self.n_components();
        let mut terms: Small = SmallVec::with_capacity(k);
        let mut means: SmallVecs = SmallVec::with_capacity(k * d);
        let mut x0_vars: Small = SmallVec::with_capacity(k);
        let mut noise_vars: Small = SmallVec::with_capacity(k);
        for i in 0..k {
            let v = self.variances[i];
            let total = a * v + b;
            let mu = self.mean(i);
            let mut sq = 0.0;
            for j in 0..d {
                let diff = x[j] - sa * mu[j];
                sq += diff * diff;
                means.push((b * mu[j] + sa * v * x[j]) / total);
            }
            terms.push(self.log_weights[i] - 0.5 * d as f64 * (LN_2PI + total.ln()) - 0.5 * sq / total);
            x0_vars.push(v * b / total);
            noise_vars.push(a * v / total);
        }
        normalize(&mut terms);
        Posterior {
            dim: d,
            level,
            resp: terms,
            means,
            x0_vars,
            noise_vars,
        }
    }

    /// `g(x) = E[x - √ᾱ X₀ | X_t = x]`.
    pub fn posterior_mean_g(&self, level: NoiseLevel, x: &[f64]) -> Vec<f64> {
        let post = self.posterior(level, x);
        let sa = level.alpha_bar().sqrt();
        post.mean().iter().zip(x).map(|(m, xi)| xi - sa * m).collect()
    }

    /// `Σ_ᾱ(x) = Cov(Z | √ᾱ X₀ + √(1-ᾱ) Z = x)`.
    pub fn posterior_covariance(&self, level: NoiseLevel, x: &[f64]) -> DMatrix<f64> {
        self.posterior(level, x).noise_covariance().to_dense()
    }

    /// `ln q(x) - ln N(x; 0, I)`, evaluated without cancelling the two log-densities.
    pub fn log_ratio_to_standard_normal(&self, x: &[f64]) -> f64 {
        self.check_dim(x);
        let d = self.dim as f64;
        let xx = dot(x, x);
        let terms: Small = (0..self.n_components())
            .map(|i| {
                let v = self.variances[i];
                let e = self.excess[i];
                let mu = self.mean(i);
                let quad = e * xx + 2.0 * dot(x, mu) - dot(mu, mu);
                self.log_weights[i] - 0.5 * d * e.ln_1p() + 0.5 * quad / v
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// CDF of a one-dimensional mixture.
    pub fn cdf(&self, x: f64) -> f64 {
        assert_eq!(self.dim, 1, "cdf is defined for d = 1");
        (0..self.n_components())
            .map(|i| self.weights[i] * std_normal_cdf((x - self.means[i]) / self.variances[i].sqrt()))
            .sum()
    }

    /// Upper-tail mass `P(X > x)` of a one-dimensional mixture, accurate far in the tail.
    pub fn upper_tail(&self, x: f64) -> f64 {
        assert_eq!(self.dim, 1, "upper_tail is defined for d = 1");
        (0..self.n_components())
            .map(|i| self.weights[i] * std_normal_cdf(-(x - self.means[i]) / self.variances[i].sqrt()))
            .sum()
    }

    /// `max ‖μ_i‖ + 6 √max v_i`; the radius that stands in for a hard support bound.
    pub fn effective_radius(&self) -> f64 {
        let mean_norm = (0..self.n_components())
            .map(|i| dot(self.mean(i), self.mean(i)).sqrt())
            .fold(0.0, f64::max);
        let max_var = self.variances.iter().copied().fold(0.0, f64::max);
        mean_norm + 6.0 * max_var.sqrt()
    }
}

pub(crate) fn pick_component(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Posterior of `X₀` given one observation of the forward process.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    dim: usize,
    level: NoiseLevel,
    resp: Small,
    means: SmallVecs,
    x0_vars: Small,
    noise_vars: Small,
}

impl Posterior {
    pub fn responsibilities(&self) -> &[f64] {
        &self.resp
    }

    fn component_mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.dim..(i + 1) * self.dim]
    }

    /// `E[X₀ | x]`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, &r) in self.resp.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.component_mean(i)) {
                *o += r * m;
            }
        }
        out
    }

    fn spread(&self, scale: f64) -> SmallVecs {
        let center = self.mean();
        let mut vectors: SmallVecs = SmallVec::with_capacity(self.means.len());
        for i in 0..self.resp.len() {
            for (m, c) in self.component_mean(i).iter().zip(&center) {
                vectors.push(scale * (m - c));
            }
        }
        vectors
    }

    /// `Cov(X₀ | x)` by the law of total covariance.
    pub fn x0_covariance(&self) -> IsoLowRank {
        IsoLowRank {
            dim: self.dim,
            diag: self.resp.iter().zip(&self.x0_vars).map(|(r, v)| r * v).sum(),
            weights: self.resp.clone(),
            vectors: self.spread(1.0),
        }
    }

    /// `Cov(Z | x) = (ᾱ / (1-ᾱ)) Cov(X₀ | x)`.
    pub fn noise_covariance(&self) -> IsoLowRank {
        let b = self.level.one_minus();
        let scale = if b > 0.0 { (self.level.alpha_bar() / b).sqrt() } else { 0.0 };
        IsoLowRank {
            dim: self.dim,
            diag: self.resp.iter().zip(&self.noise_vars).map(|(r, v)| r * v).sum(),
            weights: self.resp.clone(),
            vectors: self.spread(scale),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let i = pick_component(&self.resp, rng.random::<f64>());
        let sd = self.x0_vars[i].sqrt();
        self.component_mean(i)
            .iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Independent coordinates, each a one-dimensional mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductMixture {
    factors: Vec<GaussianMixture>,
}

impl ProductMixture {
    pub fn new(factors: Vec<GaussianMixture>) -> Result<Self, TargetError> {
        if factors.is_empty() {
            return Err(TargetError::ZeroDimension);
        }
        if factors.iter().any(|f| f.dim() != 1) {
            return Err(TargetError::FactorNotScalar);
        }
        Ok(Self { factors })
    }

    pub fn replicate(factor: GaussianMixture, dim: usize) -> Result<Self, TargetError> {
        Self::new(vec![factor; dim])
    }

    pub fn factors(&self) -> &[GaussianMixture] {
        &self.factors
    }

    /// Expands into a dense mixture with `Π K_j` components. Requires every
    /// component of every factor to share one variance (so the product stays isotropic).
    pub fn to_dense(&self) -> Option<GaussianMixture> {
        let v = self.factors[0].variance(0);
        if self
            .factors
            .iter()
            .any(|f| f.variances.iter().any(|&u| u != v))
        {
            return None;
        }
        let mut comps = vec![(1.0, Vec::new())];
        for f in &self.factors {
            let mut next = Vec::with_capacity(comps.len() * f.n_components());
            for (w, mean) in &comps {
                for i in 0..f.n_components() {
                    let mut m: Vec<f64> = mean.clone();
                    m.push(f.mean(i)[0]);
                    next.push((w * f.weights[i], m));
                }
            }
            comps = next;
        }
        let total: f64 = comps.iter().map(|c| c.0).sum();
        let comps: Vec<Component> = comps
            .into_iter()
            .map(|(w, m)| Component::new(w / total, m, v))
            .collect();
        GaussianMixture::new(self.factors.len(), &comps).ok()
    }
}

/// A data distribution: dense isotropic mixture or factorized product.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Mixture(GaussianMixture),
    Product(ProductMixture),
}

impl From<GaussianMixture> for Target {
    fn from(g: GaussianMixture) -> Self {
        Target::Mixture(g)
    }
}

impl From<ProductMixture> for Target {
    fn from(p: ProductMixture) -> Self {
        Target::Product(p)
    }
}

/// Posterior of `X₀ | X_t = x` for either target form.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum TargetPosterior {
    Mixture(Posterior),
    Product(Vec<Posterior>),
}

impl TargetPosterior {
    pub fn mean(&self) -> Vec<f64> {
        match self {
            TargetPosterior::Mixture(p) => p.mean(),
            TargetPosterior::Product(ps) => ps.iter().map(|p| p.mean()[0]).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            TargetPosterior::Mixture(p) => p.sample(rng),
            TargetPosterior::Product(ps) => ps.iter().map(|p| p.sample(rng)[0]).collect(),
        }
    }

    fn dense(&self, pick: impl Fn(&Posterior) -> IsoLowRank) -> DMatrix<f64> {
        match self {
            TargetPosterior::Mixture(p) => pick(p).to_dense(),
            TargetPosterior::Product(ps) => {
                DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                    ps.len(),
                    ps.iter().map(|p| pick(p).trace()),
                ))
            }
        }
    }

    pub fn x0_covariance(&self) -> DMatrix<f64> {
        self.dense(Posterior::x0_covariance)
    }

    pub fn noise_covariance(&self) -> DMatrix<f64> {
        self.dense(Posterior::noise_covariance)
    }

    /// `Tr(Σ_ᾱ(x)²)`.
    pub fn noise_covariance_trace_sq(&self) -> f64 {
        match self {
            TargetPosterior::Mixture(p) => p.noise_covariance().trace_sq(),
            TargetPosterior::Product(ps) => ps.iter().map(|p| p.noise_covariance().trace_sq()).sum(),
        }
    }
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::Mixture(g) => g.dim(),
            Target::Product(p) => p.factors.len(),
        }
    }

    pub fn is_product(&self) -> bool {
        matches!(self, Target::Product(_))
    }

    /// The one-dimensional mixture behind a `d = 1` target.
    pub fn as_scalar(&self) -> Option<&GaussianMixture> {
        match self {
            Target::Mixture(g) if g.dim() == 1 => Some(g),
            Target::Product(p) if p.factors.len() == 1 => Some(&p.factors[0]),
            _ => None,
        }
    }

    pub fn marginal(&self, level: NoiseLevel) -> Target {
        match self {
            Target::Mixture(g) => Target::Mixture(g.marginal(level)),
            Target::Product(p) => Target::Product(ProductMixture {
                factors: p.factors.iter().map(|f| f.marginal(level)).collect(),
            }),
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        match self {
            Target::Mixture(g) => g.log_density(x),
            Target::Product(p) => p
                .factors
                .iter()
                .zip(x)
                .map(|(f, xi)| f.log_density(std::slice::from_ref(xi)))
                .sum(),
        }
    }

    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Target::Mixture(g) => g.score_into(x, out),
            Target::Product(p) => {
                for ((f, xi), o) in p.factors.iter().zip(x).zip(out.iter_mut()) {
                    f.score_into(std::slice::from_ref(xi), std::slice::from_mut(o));
                }
            }
        }
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.score_into(x, &mut out);
        out
    }

    /// Writes the score into `score` and its Jacobian (the Hessian of `ln q`) into `hess`.
    pub fn score_and_hessian_into(&self, x: &[f64], score: &mut [f64], hess: &mut DMatrix<f64>) {
        match self {
            Target::Mixture(g) => g.score_and_hessian_structure(x, score).write_dense(hess),
            Target::Product(p) => {
                hess.fill(0.0);
                for (j, (f, xi)) in p.factors.iter().zip(x).enumerate() {
                    let h = f.score_and_hessian_structure(
                        std::slice::from_ref(xi),
                        std::slice::from_mut(&mut score[j]),
                    );
                    hess[(j, j)] = h.trace();
                }
            }
        }
    }

    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut score = vec![0.0; d];
        let mut hess = DMatrix::zeros(d, d);
        self.score_and_hessian_into(x, &mut score, &mut hess);
        hess
    }

    /// `‖∇² ln q(x)‖_F²` without forming the matrix.
    pub fn hessian_frobenius_sq(&self, x: &[f64]) -> f64 {
        match self {
            Target::Mixture(g) => {
                let mut score = vec![0.0; g.dim()];
                g.score_and_hessian_structure(x, &mut score).trace_sq()
            }
            Target::Product(p) => p
                .factors
                .iter()
                .zip(x)
                .map(|(f, xi)| {
                    let mut s = 0.0;
                    let h = f
                        .score_and_hessian_structure(std::slice::from_ref(xi), std::slice::from_mut(&mut s))
                        .trace();
                    h * h
                })
                .sum(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Target::Mixture(g) => g.sample(rng),
            Target::Product(p) => p.factors.iter().map(|f| f.sample(rng)[0]).collect(),
        }
    }

    /// `n` i.i.d. draws; draw `i` uses its own stream so the set is fixed by `seed`.
    pub fn sample_data(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        (0..n)
            .into_par_iter()
            .map(|i| self.sample(&mut derived_rng(seed, domain::DATA, 0, i as u64)))
            .collect()
    }

    pub fn posterior(&self, level: NoiseLevel, x: &[f64]) -> TargetPosterior {
        match self {
            Target::Mixture(g) => TargetPosterior::Mixture(g.posterior(level, x)),
            Target::Product(p) => TargetPosterior::Product(
                p.factors
                    .iter()
                    .zip(x)
                    .map(|(f, xi)| f.posterior(level, std::slice::from_ref(xi)))
                    .collect(),
            ),
        }
    }

    pub fn posterior_mean_g(&self, level: NoiseLevel, x: &[f64]) -> Vec<f64> {
        let sa = level.alpha_bar().sqrt();
        self.posterior(level, x)
            .mean()
            .iter()
            .zip(x)
            .map(|(m, xi)| xi - sa * m)
            .collect()
    }

    pub fn posterior_covariance(&self, level: NoiseLevel, x: &[f64]) -> DMatrix<f64> {
        self.posterior(level, x).noise_covariance()
    }

    pub fn log_ratio_to_standard_normal(&self, x: &[f64]) -> f64 {
        match self {
            Target::Mixture(g) => g.log_ratio_to_standard_normal(x),
            Target::Product(p) => p
                .factors
                .iter()
                .zip(x)
                .map(|(f, xi)| f.log_ratio_to_standard_normal(std::slice::from_ref(xi)))
                .sum(),
        }
    }

    pub fn effective_radius(&self) -> f64 {
        match self {
            Target::Mixture(g) => g.effective_radius(),
            Target::Product(p) => p
                .factors
                .iter()
                .map(|f| f.effective_radius().powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

/// A target together with its forward marginals `q_1 … q_T`, built once up front.
#[derive(Debug, Clone)]
pub struct MarginalFamily {
    base: Target,
    schedule: Arc<Schedule>,
    marginals: Vec<Target>,
}

impl MarginalFamily {
    pub fn new(base: Target, schedule: Arc<Schedule>) -> Self {
        let marginals = (1..=schedule.steps())
            .map(|t| base.marginal(schedule.noise_level(t)))
            .collect();
        Self {
            base,
            schedule,
            marginals,
        }
    }

    pub fn base(&self) -> &Target {
        &self.base
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn schedule_arc(&self) -> &Arc<Schedule> {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    /// `q_t` for `1 ≤ t ≤ T`.
    pub fn at(&self, t: usize) -> &Target {
        assert!((1..=self.steps()).contains(&t), "step {t} out of range");
        &self.marginals[t - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_comp_1d() -> GaussianMixture {
        GaussianMixture::new(
            1,
            &[
                Component::new(0.3, vec![-2.0], 0.25),
                Component::new(0.7, vec![1.5], 0.5),
            ],
        )
        .unwrap()
    }

    #[test]
    fn validation() {
        assert_eq!(GaussianMixture::new(1, &[]), Err(TargetError::Empty));
        assert!(matches!(
            GaussianMixture::new(1, &[Component::new(1.0, vec![0.0], 0.0)]),
            Err(TargetError::BadVariance { .. })
        ));
        assert!(matches!(
            GaussianMixture::new(1, &[Component::new(0.9, vec![0.0], 1.0)]),
            Err(TargetError::WeightSum(_))
        ));
        assert!(matches!(
            GaussianMixture::new(2, &[Component::new(1.0, vec![0.0], 1.0)]),
            Err(TargetError::MeanLength { .. })
        ));
    }

    #[test]
    fn marginal_at_full_signal_is_identity() {
        let g = two_comp_1d();
        assert_eq!(g.marginal(NoiseLevel::new(1.0).unwrap()), g);
    }

    #[test]
    fn marginal_of_single_gaussian() {
        let g = GaussianMixture::gaussian(vec![2.0], 0.25).unwrap();
        let m = g.marginal(NoiseLevel::new(0.5).unwrap());
        assert_relative_eq!(m.mean(0)[0], std::f64::consts::SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(m.variance(0), 0.625, epsilon = 1e-15);
    }

    #[test]
    fn marginal_tends_to_standard_normal() {
        let g = two_comp_1d();
        let m = g.marginal(NoiseLevel::from_log(-40.0).unwrap());
        for i in 0..2 {
            assert!(m.mean(i)[0].abs() < 1e-8);
            assert!((m.variance(i) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn standard_normal_log_density_at_origin() {
        let g = GaussianMixture::standard_normal(1);
        assert_relative_eq!(g.log_density(&[0.0]), -0.918_938_533_204_672_7, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_mixture_properties() {
        let g = GaussianMixture::new(
            1,
            &[
                Component::new(0.5, vec![-1.0], 0.3),
                Component::new(0.5, vec![1.0], 0.3),
            ],
        )
        .unwrap();
        assert_eq!(g.score(&[0.0])[0], 0.0);
        for &x in &[0.3, 1.7, 4.0] {
            assert_relative_eq!(g.log_density(&[x]), g.log_density(&[-x]), epsilon = 1e-14);
        }
    }

    #[test]
    fn log_density_matches_naive_sum() {
        let g = two_comp_1d();
        for &x in &[-3.0, -1.0, 0.0, 0.5, 2.0, 5.0] {
            let naive: f64 = (0..2)
                .map(|i| {
                    let v = g.variance(i);
                    let m = g.mean(i)[0];
                    g.weights()[i] * (-(x - m) * (x - m) / (2.0 * v)).exp()
                        / (2.0 * std::f64::consts::PI * v).sqrt()
                })
                .sum();
            assert_relative_eq!(g.log_density(&[x]), naive.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn log_density_survives_extreme_log_weights() {
        let g = GaussianMixture::new(
            1,
            &[
                Component::new(1.0 - 1e-300, vec![0.0], 1.0),
                Component::new(1e-300, vec![50.0], 1.0),
            ],
        )
        .unwrap();
        assert!(g.log_density(&[200.0]).is_finite());
        assert!(g.score(&[200.0])[0].is_finite());
    }

    #[test]
    fn gaussian_score_and_hessian() {
        let g = GaussianMixture::standard_normal(3);
        let x = [0.3, -1.2, 2.0];
        let s = g.score(&x);
        for j in 0..3 {
            assert_eq!(s[j], -x[j]);
        }
        let g = GaussianMixture::gaussian(vec![0.0, 0.0], 2.5).unwrap();
        let h = g.hessian(&[0.7, -0.1]);
        assert_relative_eq!(h, DMatrix::identity(2, 2) * (-1.0 / 2.5), epsilon = 1e-15);
    }

    #[test]
    fn hessian_is_exactly_symmetric() {
        let g = GaussianMixture::new(
            3,
            &[
                Component::new(0.2, vec![1.0, 0.0, -1.0], 0.4),
                Component::new(0.5, vec![-0.5, 2.0, 0.3], 1.3),
                Component::new(0.3, vec![0.0, -1.0, 1.0], 0.7),
            ],
        )
        .unwrap();
        let h = g.hessian(&[0.1, 0.4, -0.3]);
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn degenerate_weights_sample_first_component() {
        let g = GaussianMixture::new(
            1,
            &[
                Component::new(1.0, vec![-5.0], 0.01),
                Component::new(0.0, vec![5.0], 0.01),
            ],
        )
        .unwrap();
        let target = Target::from(g);
        assert!(target.sample_data(500, 3).iter().all(|x| x[0] < 0.0));
    }

    #[test]
    fn sample_data_is_seeded() {
        let target = Target::from(two_comp_1d());
        assert_eq!(target.sample_data(64, 11), target.sample_data(64, 11));
        assert_ne!(target.sample_data(64, 11), target.sample_data(64, 12));
    }

    #[test]
    fn single_component_sample_mean() {
        let g = GaussianMixture::gaussian(vec![1.5], 4.0).unwrap();
        let n = 1_000_000;
        let draws = Target::from(g).sample_data(n, 5);
        let mean = draws.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        assert!((mean - 1.5).abs() < 4.0 * 2.0 / (n as f64).sqrt());
    }

    #[test]
    fn posterior_mean_of_single_gaussian() {
        let sigma2 = 2.0;
        let g = GaussianMixture::gaussian(vec![0.0], sigma2).unwrap();
        let level = NoiseLevel::new(0.3).unwrap();
        let x = 1.7;
        let expected = x * 0.7 / (0.3 * sigma2 + 0.7);
        assert_relative_eq!(g.posterior_mean_g(level, &[x])[0], expected, epsilon = 1e-14);
    }

    #[test]
    fn posterior_covariance_single_gaussian_unit_variance() {
        let g = GaussianMixture::standard_normal(2);
        let level = NoiseLevel::new(0.37).unwrap();
        let cov = g.posterior_covariance(level, &[0.4, -2.0]);
        assert_relative_eq!(cov, DMatrix::identity(2, 2) * 0.37, epsilon = 1e-15);
    }

    #[test]
    fn posterior_covariance_vanishes_without_signal() {
        let g = two_comp_1d();
        let cov = g.posterior_covariance(NoiseLevel::new(1e-12).unwrap(), &[0.3]);
        assert!(cov[(0, 0)].abs() < 1e-11);
    }

    #[test]
    fn trace_sq_matches_dense() {
        let g = GaussianMixture::new(
            2,
            &[
                Component::new(0.4, vec![1.0, -1.0], 0.3),
                Component::new(0.6, vec![-1.0, 0.5], 0.9),
            ],
        )
        .unwrap();
        let post = g.posterior(NoiseLevel::new(0.6).unwrap(), &[0.2, 0.1]);
        let m = post.noise_covariance();
        let dense = m.to_dense();
        assert_relative_eq!(m.trace_sq(), (&dense * &dense).trace(), epsilon = 1e-13);
        assert_relative_eq!(m.trace(), dense.trace(), epsilon = 1e-14);
    }

    #[test]
    fn product_factorizes_log_density() {
        let f = two_comp_1d();
        let p = ProductMixture::new(vec![f.clone(), GaussianMixture::standard_normal(1), f.clone()]).unwrap();
        let t = Target::from(p);
        let x = [0.3, -1.0, 2.2];
        let sum = f.log_density(&[0.3])
            + GaussianMixture::standard_normal(1).log_density(&[-1.0])
            + f.log_density(&[2.2]);
        assert_relative_eq!(t.log_density(&x), sum, epsilon = 1e-12);
    }

    #[test]
    fn product_matches_dense_expansion() {
        let f = GaussianMixture::new(
            1,
            &[
                Component::new(0.3, vec![-2.0], 0.25),
                Component::new(0.7, vec![1.5], 0.25),
            ],
        )
        .unwrap();
        let p = ProductMixture::replicate(f, 3).unwrap();
        let dense = Target::from(p.to_dense().unwrap());
        let prod = Target::from(p);
        let level = NoiseLevel::new(0.8).unwrap();
        let x = [0.1, -1.5, 1.0];
        let (mp, md) = (prod.marginal(level), dense.marginal(level));
        assert_relative_eq!(mp.log_density(&x), md.log_density(&x), epsilon = 1e-12);
        for (a, b) in mp.score(&x).iter().zip(md.score(&x)) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        assert_relative_eq!(mp.hessian(&x), md.hessian(&x), epsilon = 1e-12);
        assert_relative_eq!(
            prod.posterior_covariance(level, &x),
            dense.posterior_covariance(level, &x),
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_ratio_is_exact_for_shifted_unit_gaussian() {
        let g = GaussianMixture::gaussian(vec![3.0], 1.0).unwrap();
        let m = g.marginal(NoiseLevel::from_log(-30.0).unwrap());
        let shift = 3.0 * (-15.0f64).exp();
        let x = 0.37;
        assert_relative_eq!(
            m.log_ratio_to_standard_normal(&[x]),
            shift * x - 0.5 * shift * shift,
            max_relative = 1e-12
        );
    }

    #[test]
    fn cdf_and_tail_are_complementary() {
        let g = two_comp_1d();
        for &x in &[-3.0, 0.0, 2.5] {
            assert_relative_eq!(g.cdf(x) + g.upper_tail(x), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn posterior_sampling_matches_mean() {
        let g = two_comp_1d();
        let level = NoiseLevel::new(0.5).unwrap();
        let post = g.posterior(level, &[0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let mean = (0..n).map(|_| post.sample(&mut rng)[0]).sum::<f64>() / n as f64;
        let sd = post.x0_covariance().trace().sqrt();
        assert!((mean - post.mean()[0]).abs() < 4.0 * sd / (n as f64).sqrt());
    }
}
