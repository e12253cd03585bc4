//! Hallucination and fidelity metrics, and per-timestep Laplacian statistics.

use serde::{Deserialize, Serialize};

/// Number of samples (rows of `samples`) whose Euclidean distance to every
/// mode exceeds `threshold`.
pub fn im_count(samples: &[f64], modes: &[Vec<f64>], threshold: f64) -> usize {
    assert!(!modes.is_empty(), "im_count needs at least one mode");
    let dim = modes[0].len();
    let limit = threshold * threshold;
    samples
        .chunks(dim)
        .filter(|x| {
            modes.iter().all(|m| {
                let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 > limit
            })
        })
        .count()
}

/// One histogram axis: `bins` equal bins over `[lo, hi]`. Values outside the
/// range land in the first or last bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Axis {
    pub fn bin(&self, v: f64) -> usize {
        let u = (v - self.lo) / (self.hi - self.lo) * self.bins as f64;
        if u.is_nan() || u < 0.0 {
            0
        } else {
            (u as usize).min(self.bins - 1)
        }
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * (self.hi - self.lo) / self.bins as f64
    }
}

/// Joint histogram over one axis per data dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub axes: Vec<Axis>,
}

impl HistogramSpec {
    /// 200 bins over `[min mode - 1, max mode + 1]` in 1D; 100 per axis over
    /// the mode extent padded by 1 in 2D.
    pub fn for_modes(modes: &[Vec<f64>]) -> Self {
        let dim = modes[0].len();
        let bins = if dim == 1 { 200 } else { 100 };
        let axes = (0..dim)
            .map(|j| {
                let lo = modes.iter().map(|m| m[j]).fold(f64::INFINITY, f64::min);
                let hi = modes.iter().map(|m| m[j]).fold(f64::NEG_INFINITY, f64::max);
                Axis {
                    lo: lo - 1.0,
                    hi: hi + 1.0,
                    bins,
                }
            })
            .collect();
        Self { axes }
    }

    pub fn total_bins(&self) -> usize {
        self.axes.iter().map(|a| a.bins).product()
    }

    /// Normalized bin frequencies, first axis varying fastest.
    pub fn histogram(&self, samples: &[f64]) -> Vec<f64> {
        let dim = self.axes.len();
        let mut counts = vec![0.0; self.total_bins()];
        let rows = samples.len() / dim;
        for x in samples.chunks(dim) {
            let mut idx = 0;
            let mut stride = 1;
            for (axis, v) in self.axes.iter().zip(x) {
                idx += axis.bin(*v) * stride;
                stride *= axis.bins;
            }
            counts[idx] += 1.0;
        }
        if rows > 0 {
            counts.iter_mut().for_each(|c| *c /= rows as f64);
        }
        counts
    }
}

/// `sum |p_a - p_b|` over the normalized histograms of the two sample sets; in `[0, 2]`.
pub fn l1_distance(a: &[f64], b: &[f64], spec: &HistogramSpec) -> f64 {
    let ha = spec.histogram(a);
    let hb = spec.histogram(b);
    l1_between(&ha, &hb)
}

pub fn l1_between(ha: &[f64], hb: &[f64]) -> f64 {
    ha.iter().zip(hb).map(|(p, q)| (p - q).abs()).sum()
}

/// Top-k Laplacian magnitudes across a sampling trajectory.
///
/// At each recorded timestep the `k` largest nonzero `|L_i|` are selected
/// (ties broken by index). Their mean goes into the curve; inside the window
/// their indices also increment the frequency map. Curves are stored as sums
/// and counts so that per-chain records merge by addition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplacianStats {
    pub k: usize,
    /// Inclusive forward-timestep window for the frequency map.
    pub window: (usize, usize),
    curve_sum: Vec<f64>,
    curve_count: Vec<u32>,
    frequency: Vec<u32>,
    window_steps: u32,
}

impl LaplacianStats {
    pub fn new(dim: usize, steps: usize, k: usize, window: (usize, usize)) -> Self {
        Self {
            k: k.min(dim),
            window,
            curve_sum: vec![0.0; steps],
            curve_count: vec![0; steps],
            frequency: vec![0; dim],
            window_steps: 0,
        }
    }

    pub fn update(&mut self, lap: &[f64], t: usize) {
        debug_assert_eq!(lap.len(), self.frequency.len());
        let mut idx: Vec<usize> = (0..lap.len()).filter(|&i| lap[i] != 0.0).collect();
        let by_magnitude = |a: &usize, b: &usize| {
            lap[*b].abs().total_cmp(&lap[*a].abs()).then(a.cmp(b))
        };
        if idx.len() > self.k {
            idx.select_nth_unstable_by(self.k - 1, by_magnitude);
            idx.truncate(self.k);
        }
        let mean = if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&i| lap[i].abs()).sum::<f64>() / idx.len() as f64
        };
        self.curve_sum[t] += mean;
        self.curve_count[t] += 1;
        if self.window.0 <= t && t <= self.window.1 {
            self.window_steps += 1;
            for i in idx {
                self.frequency[i] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &LaplacianStats) {
        for (a, b) in self.curve_sum.iter_mut().zip(&other.curve_sum) {
            *a += b;
        }
        for (a, b) in self.curve_count.iter_mut().zip(&other.curve_count) {
            *a += b;
        }
        for (a, b) in self.frequency.iter_mut().zip(&other.frequency) {
            *a += b;
        }
        self.window_steps += other.window_steps;
    }

    /// `(t, mean top-k |L|)` for every recorded forward timestep, ascending in `t`.
    pub fn mean_curve(&self) -> Vec<(usize, f64)> {
        self.curve_sum
            .iter()
            .zip(&self.curve_count)
            .enumerate()
            .filter(|(_, (_, c))| **c > 0)
            .map(|(t, (s, c))| (t, s / *c as f64))
            .collect()
    }

    pub fn frequency(&self) -> &[u32] {
        &self.frequency
    }

    pub fn window_steps(&self) -> u32 {
        self.window_steps
    }

    /// Forward timestep at which the mean curve peaks.
    pub fn peak(&self) -> Option<(usize, f64)> {
        self.mean_curve()
            .into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn im_count_examples() {
        let modes = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert_eq!(im_count(&[1.0, 2.0, 3.0], &modes, 0.25), 0);
        assert_eq!(im_count(&[1.0, 1.5, 2.9], &modes, 0.25), 1);
    }

    #[test]
    fn l1_extremes() {
        let spec = HistogramSpec::for_modes(&[vec![1.0], vec![3.0]]);
        let a = [1.0, 1.1, 2.5];
        assert_eq!(l1_distance(&a, &a, &spec), 0.0);
        assert!((l1_distance(&[0.5, 0.6], &[3.5, 3.6], &spec) - 2.0).abs() < 1e-12);
        // Out-of-range samples are clamped into the edge bins.
        assert_eq!(l1_distance(&[-100.0], &[0.0], &spec), 0.0);
    }

    #[test]
    fn laplacian_stats_zero_and_single() {
        let mut s = LaplacianStats::new(16, 10, 100, (2, 5));
        for t in 0..10 {
            s.update(&[0.0; 16], t);
        }
        assert!(s.mean_curve().iter().all(|(_, m)| *m == 0.0));
        assert!(s.frequency().iter().all(|f| *f == 0));

        let mut s = LaplacianStats::new(16, 10, 100, (2, 5));
        let mut lap = [0.0; 16];
        lap[7] = -3.5;
        for t in 0..10 {
            s.update(&lap, t);
        }
        assert_eq!(s.frequency()[7], 4);
        assert_eq!(s.window_steps(), 4);
        assert!(s.mean_curve().iter().all(|(_, m)| *m == 3.5));
    }

    #[test]
    fn top_k_selection() {
        let mut s = LaplacianStats::new(5, 1, 2, (0, 0));
        s.update(&[1.0, -5.0, 2.0, 4.0, 0.5], 0);
        assert_eq!(s.frequency(), &[0, 1, 0, 1, 0]);
        assert_eq!(s.mean_curve(), vec![(0, 4.5)]);
    }

    proptest! {
        #[test]
        fn im_count_monotone(samples in prop::collection::vec(-1.0f64..5.0, 1..60), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let modes = vec![vec![1.0], vec![2.0], vec![3.0]];
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(im_count(&samples, &modes, hi) <= im_count(&samples, &modes, lo));
        }

        #[test]
        fn l1_is_a_metric(
            a in prop::collection::vec(-1.0f64..5.0, 1..40),
            b in prop::collection::vec(-1.0f64..5.0, 1..40),
            c in prop::collection::vec(-1.0f64..5.0, 1..40),
        ) {
            let spec = HistogramSpec::for_modes(&[vec![1.0], vec![3.0]]);
            let ab = l1_distance(&a, &b, &spec);
            prop_assert!((ab - l1_distance(&b, &a, &spec)).abs() < 1e-12);
            prop_assert!((0.0..=2.0 + 1e-12).contains(&ab));
            prop_assert!(ab <= l1_distance(&a, &c, &spec) + l1_distance(&c, &b, &spec) + 1e-12);
        }

        #[test]
        fn mean_curve_permutation_invariant(lap in prop::collection::vec(-10.0f64..10.0, 8..40), rot in 0usize..40) {
            let mut a = LaplacianStats::new(lap.len(), 1, 5, (0, 0));
            a.update(&lap, 0);
            let mut shifted = lap.clone();
            let r = rot % lap.len();
            shifted.rotate_left(r);
            let mut b = LaplacianStats::new(lap.len(), 1, 5, (0, 0));
            b.update(&shifted, 0);
            prop_assert!((a.mean_curve()[0].1 - b.mean_curve()[0].1).abs() < 1e-12);
        }

        #[test]
        fn merge_is_order_free(x in prop::collection::vec(-1.0f64..1.0, 6), y in prop::collection::vec(-1.0f64..1.0, 6)) {
            let mk = |v: &[f64], t| {
                let mut s = LaplacianStats::new(6, 4, 2, (0, 3));
                s.update(v, t);
                s
            };
            let mut ab = mk(&x, 1);
            ab.merge(&mk(&y, 2));
            let mut ba = mk(&y, 2);
            ba.merge(&mk(&x, 1));
            prop_assert_eq!(ab, ba);
        }
    }
}
