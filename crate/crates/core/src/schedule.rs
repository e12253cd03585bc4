//! Noise schedules and the DDPM forward/reverse updates.
//!
//! Timesteps are zero-based forward indices: `t = 0` is the least noisy step and
//! `t = steps - 1` the noisiest. `alpha_bar[t]` is the cumulative product of
//! `1 - beta[s]` for `s <= t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Variance of the ancestral noise injected by [`NoiseSchedule::reverse_step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVariance {
    /// `sigma_t^2 = beta_t`
    #[default]
    Beta,
    /// `sigma_t^2 = beta_t (1 - alpha_bar[t-1]) / (1 - alpha_bar[t])`
    BetaTilde,
}

/// Serializable description of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default)]
    pub posterior_variance: PosteriorVariance,
    /// Clamp the implied clean sample to `[-c, c]` at every reverse step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_denoised: Option<f64>,
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    2e-2
}

impl ScheduleConfig {
    pub fn linear(steps: usize) -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps,
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            posterior_variance: PosteriorVariance::Beta,
            clip_denoised: None,
        }
    }

    pub fn cosine(steps: usize) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            ..Self::linear(steps)
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        let mut sched = match self.kind {
            ScheduleKind::Linear => {
                NoiseSchedule::linear_with(self.steps, self.beta_start, self.beta_end)?
            }
            ScheduleKind::Cosine => NoiseSchedule::new(ScheduleKind::Cosine, self.steps)?,
        };
        if let Some(c) = self.clip_denoised {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("clip_denoised must be positive, got {c}")));
            }
        }
        sched.variance = self.posterior_variance;
        sched.clip_denoised = self.clip_denoised;
        Ok(sched)
    }
}

/// Offset of the squared-cosine curve; keeps `beta` away from zero near `t = 0`.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clamp on `beta` for the cosine schedule.
pub const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bar: Vec<f64>,
    pub variance: PosteriorVariance,
    pub clip_denoised: Option<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule of `steps` timesteps. Linear schedules run `beta`
    /// from 1e-4 to 2e-2.
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => {
                Self::linear_with(steps, default_beta_start(), default_beta_end())
            }
            ScheduleKind::Cosine => {
                if steps == 0 {
                    return Err(Error::config("schedule needs at least one timestep"));
                }
                let f = |i: usize| cosine_curve(i as f64 / steps as f64);
                let betas = (0..steps)
                    .map(|i| (1.0 - f(i + 1) / f(i)).min(COSINE_MAX_BETA))
                    .collect();
                Self::from_betas(kind, betas)
            }
        }
    }

    pub fn linear_with(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::config(format!(
                "linear schedule endpoints must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(ScheduleKind::Linear, betas)
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bar,
            variance: PosteriorVariance::Beta,
            clip_denoised: None,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(Error::Timestep {
                t,
                steps: self.steps(),
            })
        }
    }

    /// `sqrt(1 - alpha_bar[t])`, the factor converting a score into noise:
    /// `eps = -sqrt(1 - alpha_bar[t]) * score`.
    pub fn noise_scale(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// Standard deviation of the noise injected at reverse step `t`.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        match self.variance {
            PosteriorVariance::Beta => self.betas[t].sqrt(),
            PosteriorVariance::BetaTilde => {
                let prev = self.alpha_bar[t - 1];
                (self.betas[t] * (1.0 - prev) / (1.0 - self.alpha_bar[t])).sqrt()
            }
        }
    }

    /// Forward process: `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        if x0.len() != eps.len() {
            return Err(Error::Dimension {
                expected: x0.len(),
                got: eps.len(),
            });
        }
        let (a, b) = (self.alpha_bar[t].sqrt(), self.noise_scale(t));
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// One ancestral step of the reverse process with `eps_hat` in place of
    /// the learned noise. `z` is ignored at `t = 0`.
    pub fn reverse_step(&self, x: &[f64], t: usize, eps_hat: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        let mut out = x.to_vec();
        self.reverse_step_in_place(&mut out, t, eps_hat, z);
        Ok(out)
    }

    /// In-place variant used by the samplers; `t` must already be validated.
    pub(crate) fn reverse_step_in_place(&self, x: &mut [f64], t: usize, eps_hat: &[f64], z: &[f64]) {
        let sigma = self.sigma(t);
        let noise = |xi: &mut f64, mean: f64, zi: f64| *xi = if sigma > 0.0 { mean + sigma * zi } else { mean };
        match self.clip_denoised {
            None => {
                let inv_sqrt_alpha = 1.0 / self.alphas[t].sqrt();
                let eps_coef = self.betas[t] / self.noise_scale(t);
                for (i, xi) in x.iter_mut().enumerate() {
                    noise(xi, inv_sqrt_alpha * (*xi - eps_coef * eps_hat[i]), z[i]);
                }
            }
            Some(c) => {
                // Posterior mean of q(x_{t-1} | x_t, x_0) at the clipped estimate of x_0.
                let ab = self.alpha_bar[t];
                let prev = if t == 0 { 1.0 } else { self.alpha_bar[t - 1] };
                let coef_x0 = prev.sqrt() * self.betas[t] / (1.0 - ab);
                let coef_xt = self.alphas[t].sqrt() * (1.0 - prev) / (1.0 - ab);
                let scale = self.noise_scale(t);
                for (i, xi) in x.iter_mut().enumerate() {
                    let x0 = ((*xi - scale * eps_hat[i]) / ab.sqrt()).clamp(-c, c);
                    noise(xi, coef_x0 * x0 + coef_xt * *xi, z[i]);
                }
            }
        }
    }
}

/// Squared-cosine signal curve normalized so that `cosine_alpha_bar(0) == 1`;
/// `u` is the fraction of the schedule elapsed.
pub fn cosine_alpha_bar(u: f64) -> f64 {
    cosine_curve(u) / cosine_curve(0.0)
}

fn cosine_curve(u: f64) -> f64 {
    let phase = (u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    phase.cos().powi(2)
}
