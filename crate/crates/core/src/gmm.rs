//! Isotropic Gaussian mixtures with closed-form scores and score Laplacians.
//!
//! Writing `g_i(x) = -(x - mu_i) / v_i` for the per-component score and `r_i`
//! for the posterior responsibilities, the mixture score is `s = E_r[g]`.
//! With `c_i = g_i - s` and `p_i = 1 / v_i`, the derivatives used here are
//!
//! ```text
//! d s_k / d x_j      = E_r[c_j c_k] - delta_jk E_r[p]
//! sum_j d2 s_k/dx_j2 = E_r[|c|^2 c_k] - (d + 2) E_r[p c_k]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::EpsModel;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    /// Row-major `(K, dim)`.
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::config(
                "mixture needs matching, nonempty weights/means/variances",
            ));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::config("mixture means must share a nonzero dimension"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::config("mixture weights must be nonnegative and sum to 1"));
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("mixture variances must be positive"));
        }
        Ok(Self {
            dim,
            weights,
            means: means.concat(),
            variances,
        })
    }

    /// Equal-weight mixture of isotropic components sharing one standard deviation.
    pub fn equal_weights(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        let k = means.len();
        let weights = vec![1.0 / k as f64; k];
        // Keep the sum exact so the validation tolerance is not at the mercy of 1/k rounding.
        let weights = normalize(weights);
        Self::new(weights, means, vec![sigma * sigma; k])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.dim..(i + 1) * self.dim]
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.means.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// Marginal of the forward process at `t`: means shrink by `sqrt(ab)` and
    /// variances become `ab * v + (1 - ab)`.
    pub fn noised(&self, t: usize, sched: &NoiseSchedule) -> Result<Self> {
        sched.check(t)?;
        let ab = sched.alpha_bar()[t];
        Ok(self.noised_by(ab))
    }

    pub fn noised_by(&self, alpha_bar: f64) -> Self {
        let scale = alpha_bar.sqrt();
        Self {
            dim: self.dim,
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m * scale).collect(),
            variances: self
                .variances
                .iter()
                .map(|v| alpha_bar * v + (1.0 - alpha_bar))
                .collect(),
        }
    }

    fn log_components(&self, x: &[f64], out: &mut [f64]) {
        let half_d = 0.5 * self.dim as f64;
        for (i, slot) in out.iter_mut().enumerate() {
            let v = self.variances[i];
            let sq: f64 = x.iter().zip(self.mean(i)).map(|(a, m)| (a - m) * (a - m)).sum();
            *slot = self.weights[i].ln() - half_d * (2.0 * std::f64::consts::PI * v).ln() - sq / (2.0 * v);
        }
    }

    /// Responsibilities and the log-normalizer, computed with log-sum-exp.
    fn responsibilities(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut r = vec![0.0; self.components()];
        self.log_components(x, &mut r);
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        r.iter_mut().for_each(|v| *v /= total);
        (r, max + total.ln())
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        self.responsibilities(x).1
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let (r, _) = self.responsibilities(x);
        let mut s = vec![0.0; self.dim];
        for (i, ri) in r.iter().enumerate() {
            let p = 1.0 / self.variances[i];
            for (k, sk) in s.iter_mut().enumerate() {
                *sk -= ri * (x[k] - self.mean(i)[k]) * p;
            }
        }
        s
    }

    /// Per-component Laplacian of the score, `sum_j d^2 s_k / d x_j^2`.
    pub fn score_laplacian(&self, x: &[f64]) -> Vec<f64> {
        self.score_and_laplacian(x).1
    }

    pub fn score_and_laplacian(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let (r, _) = self.responsibilities(x);
        let s = self.score(x);
        let mut lap = vec![0.0; d];
        let mut c = vec![0.0; d];
        for (i, ri) in r.iter().enumerate() {
            if *ri == 0.0 {
                continue;
            }
            let p = 1.0 / self.variances[i];
            let m = self.mean(i);
            for k in 0..d {
                c[k] = -(x[k] - m[k]) * p - s[k];
            }
            let norm2: f64 = c.iter().map(|v| v * v).sum();
            for k in 0..d {
                lap[k] += ri * (norm2 - (d as f64 + 2.0) * p) * c[k];
            }
        }
        (s, lap)
    }

    /// `n` i.i.d. draws, row-major `(n, dim)`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let pick = WeightedIndex::new(&self.weights).expect("validated weights");
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let i = pick.sample(rng);
            let sd = self.variances[i].sqrt();
            for m in self.mean(i) {
                let z: f64 = StandardNormal.sample(rng);
                out.push(m + sd * z);
            }
        }
        out
    }
}

/// Exact noise prediction of a mixture under a schedule:
/// `eps(x, t) = -sqrt(1 - alpha_bar[t]) * score_t(x)`.
#[derive(Debug, Clone)]
pub struct OracleModel {
    noised: Vec<GaussianMixture>,
    scales: Vec<f64>,
}

impl OracleModel {
    pub fn new(gm: &GaussianMixture, sched: &NoiseSchedule) -> Self {
        let noised = sched.alpha_bar().iter().map(|ab| gm.noised_by(*ab)).collect();
        let scales = (0..sched.steps()).map(|t| sched.noise_scale(t)).collect();
        Self { noised, scales }
    }

    pub fn mixture_at(&self, t: usize) -> &GaussianMixture {
        &self.noised[t]
    }
}

impl EpsModel for OracleModel {
    fn dim(&self) -> usize {
        self.noised[0].dim()
    }

    fn predict_batch(&self, xs: &[f64], t: usize) -> Vec<f64> {
        let gm = &self.noised[t];
        let scale = self.scales[t];
        xs.chunks(gm.dim())
            .flat_map(|x| gm.score(x).into_iter().map(move |s| -scale * s))
            .collect()
    }
}

fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mixture layouts accepted in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixtureSpec {
    /// Equal-weight 1D modes.
    Line { modes: Vec<f64>, sigma: f64 },
    /// `per_side x per_side` equal-weight grid on `[-extent, extent]^2`.
    Grid { per_side: usize, extent: f64, sigma: f64 },
    Explicit {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    },
}

impl MixtureSpec {
    pub fn toy1d() -> Self {
        MixtureSpec::Line {
            modes: vec![1.0, 2.0, 3.0],
            sigma: 0.05,
        }
    }

    pub fn toy2d() -> Self {
        MixtureSpec::Grid {
            per_side: 5,
            extent: 2.0,
            sigma: 0.05,
        }
    }

    pub fn build(&self) -> Result<GaussianMixture> {
        match self {
            MixtureSpec::Line { modes, sigma } => {
                GaussianMixture::equal_weights(modes.iter().map(|m| vec![*m]).collect(), *sigma)
            }
            MixtureSpec::Grid {
                per_side,
                extent,
                sigma,
            } => {
                if *per_side == 0 {
                    return Err(Error::config("grid mixture needs per_side >= 1"));
                }
                let coord = |i: usize| {
                    if *per_side == 1 {
                        0.0
                    } else {
                        -extent + 2.0 * extent * i as f64 / (*per_side - 1) as f64
                    }
                };
                let means = (0..per_side * per_side)
                    .map(|i| vec![coord(i % per_side), coord(i / per_side)])
                    .collect();
                GaussianMixture::equal_weights(means, *sigma)
            }
            MixtureSpec::Explicit {
                weights,
                means,
                variances,
            } => GaussianMixture::new(weights.clone(), means.clone(), variances.clone()),
        }
    }

    /// Smallest component standard deviation, used for the default IM threshold.
    pub fn min_sigma(&self) -> Result<f64> {
        let gm = self.build()?;
        Ok(gm
            .variances()
            .iter()
            .map(|v| v.sqrt())
            .fold(f64::INFINITY, f64::min))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn toy() -> GaussianMixture {
        MixtureSpec::toy1d().build().unwrap()
    }

    /// Richardson-extrapolated central differences (fourth order in `h`).
    fn richardson(f: impl Fn(f64) -> f64, h: f64) -> f64 {
        let d = |h: f64| f(h);
        (4.0 * d(h / 2.0) - d(h)) / 3.0
    }

    #[test]
    fn toy_matches_finite_differences() {
        let gm = toy();
        let sigma: f64 = 0.05;
        let h = 1e-4;
        for x in [1.5, 1.503, 1.4975, 2.51, 0.98] {
            let (s, l) = gm.score_and_laplacian(&[x]);
            let fd = richardson(|h| (gm.log_density(&[x + h]) - gm.log_density(&[x - h])) / (2.0 * h), h);
            let fd2 = richardson(
                |h| (gm.score(&[x + h])[0] - 2.0 * s[0] + gm.score(&[x - h])[0]) / (h * h),
                h,
            );
            // Errors are measured against the natural units 1/sigma and 1/sigma^3.
            assert!((s[0] - fd).abs() / s[0].abs().max(1.0 / sigma) < 1e-4, "{x}: {} vs {fd}", s[0]);
            assert!((l[0] - fd2).abs() / l[0].abs().max(sigma.powi(-3)) < 1e-4, "{x}: {} vs {fd2}", l[0]);
        }
    }

    #[test]
    fn grid_laplacian_matches_stencil() {
        let gm = MixtureSpec::toy2d().build().unwrap().noised_by(0.97);
        let x = [0.45, 0.12];
        let h = 1e-3;
        let l = gm.score_laplacian(&x);
        let f = |p: [f64; 2]| gm.score(&p);
        let c = f(x);
        for k in 0..2 {
            let st = f([x[0] + h, x[1]])[k] + f([x[0] - h, x[1]])[k] + f([x[0], x[1] + h])[k]
                + f([x[0], x[1] - h])[k]
                - 4.0 * c[k];
            let st = st / (h * h);
            assert!(((l[k] - st) / l[k].abs().max(1.0)).abs() < 1e-3, "{k}: {} vs {st}", l[k]);
        }
    }

    #[test]
    fn far_points_stay_finite() {
        let gm = toy();
        for x in [-1e3, 1e3, 2.0 + 1e-9] {
            let (s, l) = gm.score_and_laplacian(&[x]);
            assert!(s[0].is_finite() && l[0].is_finite());
            assert!(gm.log_density(&[x]).is_finite());
        }
    }

    #[test]
    fn noised_limits() {
        let gm = toy();
        assert_eq!(gm.noised_by(1.0), gm);
        let far = gm.noised_by(1e-12);
        for i in 0..3 {
            assert!(far.mean(i)[0].abs() < 1e-5);
            assert!((far.variances()[i] - 1.0).abs() < 1e-9);
        }
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
        assert!(gm.noised(1000, &s).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_balanced() {
        let gm = toy();
        assert_eq!(gm.sample(100, 3), gm.sample(100, 3));
        let xs = gm.sample(30_000, 11);
        let mut counts = [0usize; 3];
        for x in &xs {
            counts[((x - 0.5).floor() as usize).min(2)] += 1;
        }
        let sd = (30_000.0_f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn degenerate_component_samples_at_mean() {
        let gm = GaussianMixture::new(vec![1.0], vec![vec![0.7]], vec![1e-30]).unwrap();
        assert!(gm.sample(50, 0).iter().all(|x| (x - 0.7).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(GaussianMixture::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
        assert!(GaussianMixture::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn grid_layout() {
        let gm = MixtureSpec::toy2d().build().unwrap();
        assert_eq!(gm.components(), 25);
        assert_eq!(gm.mean(0), &[-2.0, -2.0]);
        assert_eq!(gm.mean(24), &[2.0, 2.0]);
        assert_eq!(gm.mean(7), &[0.0, -1.0]);
    }
}
