//! Two-phase learning-rate schedule.
//!
//! `β_1 = T^{-c0}`, then `β_t = r·min{β_1 (1 + r)^t, 1}` with `r = c1 ln T / T`:
//! exponential growth until `β_t` reaches `r`, flat afterwards. `ᾱ_t` is kept
//! in log space so that `1 - ᾱ_t` stays accurate when `ᾱ_t` is close to one.

use serde::{Deserialize, Serialize};

use crate::error::ScheduleError;

/// Signal level `ᾱ` together with an accurately computed `1 - ᾱ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    alpha_bar: f64,
    one_minus: f64,
}

impl NoiseLevel {
    /// Builds a level from `ᾱ ∈ (0, 1]`; `1 - ᾱ` is computed by subtraction.
    pub fn new(alpha_bar: f64) -> Result<Self, ScheduleError> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(ScheduleError::AlphaBarOutOfRange(alpha_bar));
        }
        Ok(Self {
            alpha_bar,
            one_minus: 1.0 - alpha_bar,
        })
    }

    /// Builds a level from `ln ᾱ ≤ 0`, keeping full relative precision in both parts.
    pub fn from_log(log_alpha_bar: f64) -> Result<Self, ScheduleError> {
        if !(log_alpha_bar <= 0.0 && log_alpha_bar.is_finite()) {
            return Err(ScheduleError::AlphaBarOutOfRange(log_alpha_bar.exp()));
        }
        Ok(Self {
            alpha_bar: log_alpha_bar.exp(),
            one_minus: -log_alpha_bar.exp_m1(),
        })
    }

    pub fn alpha_bar(&self) -> f64 {
        self.alpha_bar
    }

    pub fn one_minus(&self) -> f64 {
        self.one_minus
    }

    /// Signal-to-noise ratio `ᾱ / (1 - ᾱ)`.
    pub fn snr(&self) -> f64 {
        self.alpha_bar / self.one_minus
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    steps: usize,
    c0: f64,
    c1: f64,
    beta: Vec<f64>,
    log_alpha_bar: Vec<f64>,
}

impl Schedule {
    /// Builds the schedule for horizon `steps` (`T`).
    pub fn new(steps: usize, c0: f64, c1: f64) -> Result<Self, ScheduleError> {
        if steps < 2 {
            return Err(ScheduleError::TooFewSteps(steps));
        }
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(ScheduleError::NonPositiveConstant { name: "c0", value: c0 });
        }
        if !(c1 > 0.0 && c1.is_finite()) {
            return Err(ScheduleError::NonPositiveConstant { name: "c1", value: c1 });
        }
        let horizon = steps as f64;
        let rate = c1 * horizon.ln() / horizon;
        if rate >= 1.0 {
            return Err(ScheduleError::RateTooLarge(rate));
        }

        let beta_1 = horizon.powf(-c0);
        let mut beta = Vec::with_capacity(steps);
        beta.push(beta_1);
        for t in 2..=steps {
            let growth = beta_1 * (1.0 + rate).powf(t as f64);
            beta.push(rate * growth.min(1.0));
        }
        if let Some((idx, &b)) = beta
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(ScheduleError::BetaOutOfRange { step: idx + 1, beta: b });
        }

        // Neumaier-compensated running sum of ln α_t.
        let mut log_alpha_bar = Vec::with_capacity(steps);
        let (mut acc, mut comp) = (0.0f64, 0.0f64);
        for &b in &beta {
            let term = (-b).ln_1p();
            let next = acc + term;
            comp += if acc.abs() >= term.abs() {
                (acc - next) + term
            } else {
                (term - next) + acc
            };
            acc = next;
            log_alpha_bar.push(acc + comp);
        }

        Ok(Self {
            steps,
            c0,
            c1,
            beta,
            log_alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    /// `c1 ln T / T`, the saturated value of `β_t`.
    pub fn rate(&self) -> f64 {
        let horizon = self.steps as f64;
        self.c1 * horizon.ln() / horizon
    }

    fn index(&self, t: usize) -> usize {
        assert!(
            (1..=self.steps).contains(&t),
            "step {t} outside 1..={}",
            self.steps
        );
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.index(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn log_alpha_bar(&self, t: usize) -> f64 {
        self.log_alpha_bar[self.index(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.log_alpha_bar(t).exp()
    }

    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        -self.log_alpha_bar(t).exp_m1()
    }

    pub fn noise_level(&self, t: usize) -> NoiseLevel {
        NoiseLevel::from_log(self.log_alpha_bar(t)).expect("schedule levels are valid")
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn max_beta(&self) -> f64 {
        self.beta.iter().copied().fold(0.0, f64::max)
    }

    /// Smallest `t` with `β_1 (1 + r)^t ≥ 1`, or `T + 1` if the schedule never saturates.
    pub fn saturation_step(&self) -> usize {
        let rate = self.rate();
        let beta_1 = self.beta[0];
        let reached = |t: usize| beta_1 * (1.0 + rate).powf(t as f64) >= 1.0;
        let guess = (-beta_1.ln() / rate.ln_1p()).ceil().max(1.0);
        if !guess.is_finite() || guess > self.steps as f64 + 1.0 {
            return self.steps + 1;
        }
        let mut t = guess as usize;
        while t > 1 && reached(t - 1) {
            t -= 1;
        }
        while t <= self.steps && !reached(t) {
            t += 1;
        }
        t.min(self.steps + 1)
    }

    /// Checks the five learning-rate properties; `c2` is the target exponent for `ᾱ_T ≤ T^{-c2}`.
    pub fn verify_properties(&self, c2: f64) -> PropertyReport {
        let horizon = self.steps as f64;
        let rate = self.rate();
        let steps = self.steps;

        // (a) α_t ≥ 1 - r ≥ 1/2
        let floor = 1.0 - rate;
        let slack_a = (1..=steps)
            .map(|t| self.alpha(t) - floor)
            .fold(f64::INFINITY, f64::min)
            .min(floor - 0.5);

        // (b) (1 - α_t) / (1 - ᾱ_{t-1}) ≤ 4r for t ≥ 2
        let slack_b = (2..=steps)
            .map(|t| 4.0 * rate - self.beta(t) / self.one_minus_alpha_bar(t - 1))
            .fold(f64::INFINITY, f64::min);

        // (c) 1 ≤ (1 - ᾱ_t) / (1 - ᾱ_{t-1}) ≤ 1 + 4r for t ≥ 2
        let slack_c = (2..=steps)
            .map(|t| {
                let ratio = self.one_minus_alpha_bar(t) / self.one_minus_alpha_bar(t - 1);
                (ratio - 1.0).min(1.0 + 4.0 * rate - ratio)
            })
            .fold(f64::INFINITY, f64::min);

        // (d) ᾱ_T ≤ T^{-c2}, compared in exponent space
        let exponent = -self.log_alpha_bar(steps) / horizon.ln();
        let slack_d = exponent - c2;

        // (e) snr_{t+1} ≤ snr_t ≤ 4 snr_{t+1}, compared in log space
        let log_snr = |t: usize| {
            let level = self.noise_level(t);
            self.log_alpha_bar(t) - level.one_minus().ln()
        };
        let slack_e = (1..steps)
            .map(|t| {
                let gap = log_snr(t) - log_snr(t + 1);
                gap.min(4f64.ln() - gap)
            })
            .fold(f64::INFINITY, f64::min);

        let entry = |id: PropertyId, slack: f64| PropertyCheck {
            id,
            pass: slack >= 0.0 || slack == f64::INFINITY,
            margin: slack,
        };
        PropertyReport {
            checks: vec![
                entry(PropertyId::AlphaLowerBound, slack_a),
                entry(PropertyId::StepToNoiseRatio, slack_b),
                entry(PropertyId::NoiseGrowth, slack_c),
                entry(PropertyId::TerminalAlphaBar, slack_d),
                entry(PropertyId::SnrRatio, slack_e),
            ],
            alpha_bar_exponent: exponent,
            c2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PropertyId {
    AlphaLowerBound,
    StepToNoiseRatio,
    NoiseGrowth,
    TerminalAlphaBar,
    SnrRatio,
}

impl PropertyId {
    pub fn as_str(&self) -> &'static str {
        match self {
            PropertyId::AlphaLowerBound => "a_alpha_lower_bound",
            PropertyId::StepToNoiseRatio => "b_step_to_noise_ratio",
            PropertyId::NoiseGrowth => "c_noise_growth",
            PropertyId::TerminalAlphaBar => "d_terminal_alpha_bar",
            PropertyId::SnrRatio => "e_snr_ratio",
        }
    }
}

/// One property outcome. `margin` is the worst-case signed slack (negative means violated);
/// empty index ranges report `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyCheck {
    pub id: PropertyId,
    pub pass: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub checks: Vec<PropertyCheck>,
    /// Achieved `-ln ᾱ_T / ln T`.
    pub alpha_bar_exponent: f64,
    pub c2: f64,
}

impl PropertyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, id: PropertyId) -> Option<&PropertyCheck> {
        self.checks.iter().find(|c| c.id == id)
    }
}
