//! Second-derivative estimators of the noise prediction and the sharpened
//! denoiser built on them.
//!
//! The sharpened prediction is `eps - alpha * L(x)` where `L` is the
//! per-component Laplacian of `eps` around `x`. Three estimators are
//! available: a central second difference (1D), the five-point stencil (2D)
//! and a Rademacher-probe central difference whose expectation is the trace
//! of each component's Hessian (any dimension).

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::EpsModel;
use crate::error::{Error, Result};

/// When sharpening is active, in forward-timestep convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gate {
    /// Open for `t < t_threshold`.
    Threshold { t_threshold: usize },
    /// Open for `t_low < t < t_high`.
    Range { t_low: usize, t_high: usize },
}

impl Gate {
    pub fn is_open(&self, t: usize) -> bool {
        match *self {
            Gate::Threshold { t_threshold } => t < t_threshold,
            Gate::Range { t_low, t_high } => t_low < t && t < t_high,
        }
    }

    /// The same gate expressed in sampling-step convention (`steps - t`),
    /// for reporting.
    pub fn describe(&self, steps: usize) -> String {
        match *self {
            Gate::Threshold { t_threshold } => format!(
                "forward t < {t_threshold} (sampling steps > {})",
                steps.saturating_sub(t_threshold)
            ),
            Gate::Range { t_low, t_high } => format!(
                "forward ({t_low}, {t_high}) (sampling ({}, {}))",
                steps.saturating_sub(t_high),
                steps.saturating_sub(t_low)
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Fd1d,
    Stencil2d,
    Hutchinson,
}

impl EstimatorMode {
    /// Extra model evaluations per chain per gated step.
    pub fn extra_evals(&self, n_samples: usize) -> usize {
        match self {
            EstimatorMode::Fd1d => 2,
            EstimatorMode::Stencil2d => 4,
            EstimatorMode::Hutchinson => 2 * n_samples,
        }
    }

    /// Natural estimator for data of dimension `dim`.
    pub fn for_dim(dim: usize) -> Self {
        match dim {
            1 => EstimatorMode::Fd1d,
            2 => EstimatorMode::Stencil2d,
            _ => EstimatorMode::Hutchinson,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpeningConfig {
    pub alpha: f64,
    pub delta: f64,
    #[serde(flatten)]
    pub gate: Gate,
    #[serde(default = "default_samples")]
    pub hutchinson_samples: usize,
    pub estimator: EstimatorMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> usize {
    3
}

impl SharpeningConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.delta > 0.0) || self.hutchinson_samples == 0 {
            return Err(Error::config("sharpening needs alpha >= 0, delta > 0, hutchinson_samples >= 1"));
        }
        if let Gate::Range { t_low, t_high } = self.gate {
            if t_low >= t_high || t_high > steps {
                return Err(Error::config(format!(
                    "timestep range ({t_low}, {t_high}) must satisfy t_low < t_high <= {steps}"
                )));
            }
        }
        Ok(())
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let expected = match self.estimator {
            EstimatorMode::Fd1d => 1,
            EstimatorMode::Stencil2d => 2,
            EstimatorMode::Hutchinson => return Ok(()),
        };
        if dim == expected {
            Ok(())
        } else {
            Err(Error::Dimension { expected, got: dim })
        }
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 {
        Ok(())
    } else {
        Err(Error::config("perturbation size must be positive"))
    }
}

/// Central second difference of `f(., t)` at `x`; `fx` is the caller's
/// `f(x, t)`, so exactly two further evaluations are made.
pub fn second_derivative_1d<F>(mut f: F, x: f64, fx: f64, t: usize, delta: f64) -> Result<f64>
where
    F: FnMut(f64, usize) -> f64,
{
    check_delta(delta)?;
    let d2 = (f(x + delta, t) + f(x - delta, t) - 2.0 * fx) / (delta * delta);
    if d2.is_finite() {
        Ok(d2)
    } else {
        Err(Error::Estimator { t })
    }
}

/// Five-point-stencil Laplacian of each output component of `f(., t)` at `x`.
pub fn laplacian_2d<F>(mut f: F, x: [f64; 2], fx: [f64; 2], t: usize, delta: f64) -> Result<[f64; 2]>
where
    F: FnMut([f64; 2], usize) -> [f64; 2],
{
    check_delta(delta)?;
    let [a, b] = x;
    let probes = [
        f([a + delta, b], t),
        f([a - delta, b], t),
        f([a, b + delta], t),
        f([a, b - delta], t),
    ];
    let mut out = [0.0; 2];
    for k in 0..2 {
        let sum: f64 = probes.iter().map(|p| p[k]).sum();
        out[k] = (sum - 4.0 * fx[k]) / (delta * delta);
    }
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::Estimator { t })
    }
}

/// Fills `v` with independent ±1 entries.
pub fn rademacher<R: Rng + ?Sized>(rng: &mut R, v: &mut [f64]) {
    for e in v.iter_mut() {
        *e = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
}

/// Hutchinson estimate of the Laplacian of every output component of
/// `f(., t)` at `x`: the mean over `n_samples` Rademacher directions `v` of
/// `(f(x + delta v) - 2 f(x) + f(x - delta v)) / delta^2`.
pub fn hutchinson_laplacian<F, R>(
    mut f: F,
    x: &[f64],
    fx: &[f64],
    t: usize,
    delta: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Vec<f64>,
    R: Rng + ?Sized,
{
    check_delta(delta)?;
    if n_samples == 0 {
        return Err(Error::config("hutchinson needs at least one sample"));
    }
    let d = x.len();
    let mut v = vec![0.0; d];
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut total = vec![0.0; fx.len()];
    for _ in 0..n_samples {
        rademacher(rng, &mut v);
        for j in 0..d {
            plus[j] = x[j] + delta * v[j];
            minus[j] = x[j] - delta * v[j];
        }
        let fp = f(&plus, t);
        let fm = f(&minus, t);
        for k in 0..total.len() {
            total[k] += (fp[k] - 2.0 * fx[k] + fm[k]) / (delta * delta);
        }
    }
    let n = n_samples as f64;
    total.iter_mut().for_each(|v| *v /= n);
    if total.iter().all(|v| v.is_finite()) {
        Ok(total)
    } else {
        Err(Error::Estimator { t })
    }
}

/// Running diagnostics of a sharpened sampler; merges by addition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SharpenStats {
    /// Chain-steps where the gate was open.
    pub gated: u64,
    /// Chain-steps that fell back to the unsharpened prediction.
    pub fallbacks: u64,
    pub sum_abs_eps: f64,
    pub sum_abs_laplacian: f64,
    pub entries: u64,
}

impl SharpenStats {
    pub fn merge(&mut self, other: &SharpenStats) {
        self.gated += other.gated;
        self.fallbacks += other.fallbacks;
        self.sum_abs_eps += other.sum_abs_eps;
        self.sum_abs_laplacian += other.sum_abs_laplacian;
        self.entries += other.entries;
    }

    /// Observed `mean|eps| / mean|L|` over gated steps: the strength at which
    /// the correction term would match the prediction in magnitude.
    pub fn eps_to_laplacian_ratio(&self) -> Option<f64> {
        (self.entries > 0 && self.sum_abs_laplacian > 0.0).then(|| self.sum_abs_eps / self.sum_abs_laplacian)
    }
}

/// Batched Laplacian estimate of `model` around each row of `xs`. `base` is
/// the model output at `xs`; `probes` holds one RNG per row (only drawn
/// from by the Hutchinson estimator).
#[allow(clippy::too_many_arguments)]
pub fn estimate_laplacian<M: EpsModel + ?Sized>(
    model: &M,
    xs: &[f64],
    base: &[f64],
    t: usize,
    mode: EstimatorMode,
    delta: f64,
    n_samples: usize,
    probes: &mut [ChaCha8Rng],
) -> Vec<f64> {
    let d = model.dim();
    let inv = 1.0 / (delta * delta);
    let shifted = |coord: Option<usize>, sign: f64| -> Vec<f64> {
        let mut out = xs.to_vec();
        for row in out.chunks_mut(d) {
            match coord {
                Some(j) => row[j] += sign * delta,
                None => row.iter_mut().for_each(|v| *v += sign * delta),
            }
        }
        out
    };
    match mode {
        EstimatorMode::Fd1d => {
            let p = model.predict_batch(&shifted(None, 1.0), t);
            let m = model.predict_batch(&shifted(None, -1.0), t);
            (0..base.len()).map(|i| (p[i] + m[i] - 2.0 * base[i]) * inv).collect()
        }
        EstimatorMode::Stencil2d => {
            let mut acc: Vec<f64> = base.iter().map(|b| -4.0 * b).collect();
            for (coord, sign) in [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)] {
                let f = model.predict_batch(&shifted(Some(coord), sign), t);
                acc.iter_mut().zip(&f).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a *= inv);
            acc
        }
        EstimatorMode::Hutchinson => {
            let mut total = vec![0.0; base.len()];
            let mut v = vec![0.0; xs.len()];
            for _ in 0..n_samples {
                for (row, rng) in v.chunks_mut(d).zip(probes.iter_mut()) {
                    rademacher(rng, row);
                }
                let plus: Vec<f64> = xs.iter().zip(&v).map(|(x, r)| x + delta * r).collect();
                let minus: Vec<f64> = xs.iter().zip(&v).map(|(x, r)| x - delta * r).collect();
                let p = model.predict_batch(&plus, t);
                let m = model.predict_batch(&minus, t);
                for i in 0..total.len() {
                    total[i] += (p[i] - 2.0 * base[i] + m[i]) * inv;
                }
            }
            let n = n_samples as f64;
            total.iter_mut().for_each(|v| *v /= n);
            total
        }
    }
}

/// A model wrapped with score sharpening.
#[derive(Debug, Clone)]
pub struct Sharpened<M> {
    model: M,
    cfg: SharpeningConfig,
}

impl<M: EpsModel> Sharpened<M> {
    pub fn new(model: M, cfg: SharpeningConfig) -> Result<Self> {
        cfg.check_dim(model.dim())?;
        Ok(Self { model, cfg })
    }

    pub fn config(&self) -> &SharpeningConfig {
        &self.cfg
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    /// Applies sharpening to a precomputed `base = model(xs, t)`. Rows whose
    /// estimate is not finite keep their base prediction.
    pub fn apply(
        &self,
        xs: &[f64],
        mut base: Vec<f64>,
        t: usize,
        probes: &mut [ChaCha8Rng],
        stats: &mut SharpenStats,
    ) -> Vec<f64> {
        if !self.cfg.gate.is_open(t) {
            return base;
        }
        let d = self.model.dim();
        let lap = estimate_laplacian(
            &self.model,
            xs,
            &base,
            t,
            self.cfg.estimator,
            self.cfg.delta,
            self.cfg.hutchinson_samples,
            probes,
        );
        for (b, l) in base.chunks_mut(d).zip(lap.chunks(d)) {
            stats.gated += 1;
            if l.iter().any(|v| !v.is_finite()) {
                stats.fallbacks += 1;
                continue;
            }
            for (bi, li) in b.iter_mut().zip(l) {
                stats.sum_abs_eps += bi.abs();
                stats.sum_abs_laplacian += li.abs();
                stats.entries += 1;
                *bi -= self.cfg.alpha * li;
            }
        }
        base
    }

    pub fn denoise_batch(
        &self,
        xs: &[f64],
        t: usize,
        probes: &mut [ChaCha8Rng],
        stats: &mut SharpenStats,
    ) -> Vec<f64> {
        let base = self.model.predict_batch(xs, t);
        self.apply(xs, base, t, probes, stats)
    }
}

/// Single-point sharpened prediction: `base(x, t)` is evaluated once and,
/// if the gate is open, corrected by `-alpha * L(x)`.
pub fn sharpened_denoise<F, R>(
    mut base: F,
    x: &[f64],
    t: usize,
    cfg: &SharpeningConfig,
    rng: &mut R,
    stats: &mut SharpenStats,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Vec<f64>,
    R: Rng + ?Sized,
{
    cfg.check_dim(x.len())?;
    let fx = base(x, t);
    if !cfg.gate.is_open(t) {
        return Ok(fx);
    }
    stats.gated += 1;
    let lap = match cfg.estimator {
        EstimatorMode::Fd1d => {
            second_derivative_1d(|p, t| base(&[p], t)[0], x[0], fx[0], t, cfg.delta).map(|v| vec![v])
        }
        EstimatorMode::Stencil2d => laplacian_2d(
            |p, t| {
                let v = base(&p, t);
                [v[0], v[1]]
            },
            [x[0], x[1]],
            [fx[0], fx[1]],
            t,
            cfg.delta,
        )
        .map(|v| v.to_vec()),
        EstimatorMode::Hutchinson => {
            hutchinson_laplacian(&mut base, x, &fx, t, cfg.delta, cfg.hutchinson_samples, rng)
        }
    };
    match lap {
        Ok(l) => {
            for (e, li) in fx.iter().zip(&l) {
                stats.sum_abs_eps += e.abs();
                stats.sum_abs_laplacian += li.abs();
                stats.entries += 1;
            }
            Ok(fx.iter().zip(&l).map(|(e, li)| e - cfg.alpha * li).collect())
        }
        Err(Error::Estimator { .. }) => {
            stats.fallbacks += 1;
            log::warn!("non-finite Laplacian estimate at t={t}; using unsharpened prediction");
            Ok(fx)
        }
        Err(e) => Err(e),
    }
}

/// Evaluates a per-point closure row by row.
pub struct FnModel<F> {
    dim: usize,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&[f64], usize) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> EpsModel for FnModel<F>
where
    F: Fn(&[f64], usize) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_batch(&self, xs: &[f64], t: usize) -> Vec<f64> {
        xs.chunks(self.dim).flat_map(|x| (self.f)(x, t)).collect()
    }
}

/// Counts evaluated rows, per timestep-agnostic total.
pub struct CountingModel<M> {
    inner: M,
    rows: AtomicUsize,
    max_t: AtomicUsize,
}

impl<M: EpsModel> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            rows: AtomicUsize::new(0),
            max_t: AtomicUsize::new(0),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows.load(Ordering::Relaxed)
    }

    pub fn max_t(&self) -> usize {
        self.max_t.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.rows.store(0, Ordering::Relaxed);
    }
}

impl<M: EpsModel> EpsModel for CountingModel<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict_batch(&self, xs: &[f64], t: usize) -> Vec<f64> {
        self.rows.fetch_add(xs.len() / self.inner.dim(), Ordering::Relaxed);
        self.max_t.fetch_max(t, Ordering::Relaxed);
        self.inner.predict_batch(xs, t)
    }
}
