//! Feedforward ε-predictor for low-dimensional data.
//!
//! Input rows are `[x, emb(t)]`; hidden layers use SiLU; the output layer is
//! linear with the data dimension. Weights are stored `(in, out)` row-major
//! followed by the bias, layer after layer, in one flat vector.

use rand::Rng;

use super::linalg::{add_bias, col_sums, gemm, silu, silu_grad, time_embedding};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dim: usize,
    time_dim: usize,
    widths: Vec<usize>,
    offsets: Vec<usize>,
}

/// Activations kept for the backward pass.
pub struct MlpCache {
    rows: usize,
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(dim: usize, hidden: &[usize], time_dim: usize) -> Self {
        let mut widths = vec![dim + time_dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut offsets = vec![0];
        for w in widths.windows(2) {
            let last = *offsets.last().unwrap();
            offsets.push(last + w[0] * w[1] + w[1]);
        }
        Self {
            dim,
            time_dim,
            widths,
            offsets,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn param_count(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// `(weight, bias)` ranges of layer `l`.
    fn ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start = self.offsets[l];
        let w_end = start + self.widths[l] * self.widths[l + 1];
        (start..w_end, w_end..self.offsets[l + 1])
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        for l in 0..self.layers() {
            let bound = 1.0 / (self.widths[l] as f64).sqrt();
            let (w, b) = self.ranges(l);
            for v in &mut params[w.start..b.end] {
                *v = rng.random_range(-bound..bound);
            }
        }
        params
    }

    /// Zeroes the output layer so the network predicts 0 everywhere.
    pub fn zero_output(&self, params: &mut [f64]) {
        let (w, b) = self.ranges(self.layers() - 1);
        params[w.start..b.end].iter_mut().for_each(|v| *v = 0.0);
    }

    fn input_rows(&self, xs: &[f64], ts: &[usize]) -> Vec<f64> {
        let width = self.widths[0];
        let mut input = vec![0.0; ts.len() * width];
        let mut cached: Option<(usize, Vec<f64>)> = None;
        for (r, (row, x)) in input.chunks_mut(width).zip(xs.chunks(self.dim)).enumerate() {
            row[..self.dim].copy_from_slice(x);
            let t = ts[r];
            match &cached {
                Some((ct, emb)) if *ct == t => row[self.dim..].copy_from_slice(emb),
                _ => {
                    time_embedding(t, self.time_dim, &mut row[self.dim..]);
                    cached = Some((t, row[self.dim..].to_vec()));
                }
            }
        }
        input
    }

    pub fn forward(&self, params: &[f64], xs: &[f64], ts: &[usize]) -> Vec<f64> {
        self.forward_cached(params, xs, ts).0
    }

    pub fn forward_cached(&self, params: &[f64], xs: &[f64], ts: &[usize]) -> (Vec<f64>, MlpCache) {
        let rows = ts.len();
        assert_eq!(xs.len(), rows * self.dim, "input rows do not match timesteps");
        let mut h = self.input_rows(xs, ts);
        let mut inputs = Vec::with_capacity(self.layers());
        let mut pre = Vec::with_capacity(self.layers() - 1);
        for l in 0..self.layers() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = self.ranges(l);
            let mut z = vec![0.0; rows * n_out];
            gemm(rows, n_in, n_out, &h, false, &params[w], false, 0.0, &mut z);
            add_bias(&mut z, &params[b]);
            inputs.push(std::mem::take(&mut h));
            if l + 1 < self.layers() {
                h = z.iter().map(|v| silu(*v)).collect();
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, MlpCache { rows, inputs, pre })
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. the outputs),
    /// accumulating parameter gradients into `grad`.
    pub fn backward(&self, params: &[f64], cache: &MlpCache, d_out: &[f64], grad: &mut [f64]) {
        let rows = cache.rows;
        let mut dz = d_out.to_vec();
        for l in (0..self.layers()).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = self.ranges(l);
            gemm(n_in, rows, n_out, &cache.inputs[l], true, &dz, false, 1.0, &mut grad[w.clone()]);
            col_sums(&dz, &mut grad[b]);
            if l == 0 {
                break;
            }
            let mut da = vec![0.0; rows * n_in];
            gemm(rows, n_out, n_in, &dz, false, &params[w], true, 0.0, &mut da);
            for (d, z) in da.iter_mut().zip(&cache.pre[l - 1]) {
                *d *= silu_grad(*z);
            }
            dz = da;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout() {
        let m = Mlp::new(2, &[4, 3], 6);
        assert_eq!(m.param_count(), 8 * 4 + 4 + 4 * 3 + 3 + 3 * 2 + 2);
    }

    #[test]
    fn zero_output_predicts_zero() {
        let m = Mlp::new(1, &[8, 8], 4);
        let mut p = m.init(&mut ChaCha8Rng::seed_from_u64(0));
        m.zero_output(&mut p);
        let out = m.forward(&p, &[0.3, -2.0, 5.0], &[0, 10, 99]);
        assert!(out.iter().all(|v| *v == 0.0));
    }
}
