//! Small convolutional encoder–decoder ε-predictor for grayscale images.
//!
//! Activations are stored NHWC, flattened to `(images * pixels, channels)`
//! so every 3x3 convolution is one im2col matrix product. The topology is
//!
//! ```text
//! x ─ conv(1→c1) ─ e1 ─ pool ─ conv(c1→c2) ─ e2 ─ pool ─ conv(c2→c2) ─ m
//!                  │                         │                         │
//!                  │                         └── cat ── conv(2c2→c1) ─ up
//!                  └──────────── cat ── conv(2c1→c1) ─ up ─────────────┘
//!                                      └─ conv(c1→1) = output
//! ```
//!
//! and every hidden convolution also receives a per-channel projection of the
//! sinusoidal time embedding before its SiLU.

use rand::Rng;

use super::linalg::{add_bias, col_sums, gemm, silu, silu_grad, time_embedding};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv3 {
    cin: usize,
    cout: usize,
    w: usize,
    b: usize,
}

impl Conv3 {
    fn weights(&self) -> std::ops::Range<usize> {
        self.w..self.w + 9 * self.cin * self.cout
    }

    fn bias(&self) -> std::ops::Range<usize> {
        self.b..self.b + self.cout
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TimeProj {
    c: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    height: usize,
    width: usize,
    c1: usize,
    c2: usize,
    time_dim: usize,
    enc1: Conv3,
    enc2: Conv3,
    mid: Conv3,
    dec2: Conv3,
    dec1: Conv3,
    out: Conv3,
    /// Time projections for enc1, enc2, mid, dec2, dec1.
    proj: [TimeProj; 5],
    params: usize,
}

/// Spatial extent of one activation tensor.
#[derive(Debug, Clone, Copy)]
struct Grid {
    images: usize,
    h: usize,
    w: usize,
}

impl Grid {
    fn pixels(&self) -> usize {
        self.images * self.h * self.w
    }

    fn half(&self) -> Grid {
        Grid {
            images: self.images,
            h: self.h / 2,
            w: self.w / 2,
        }
    }
}

pub struct ConvCache {
    grid: Grid,
    x: Vec<f64>,
    temb: Vec<f64>,
    za: Vec<f64>,
    p1: Vec<f64>,
    zb: Vec<f64>,
    p2: Vec<f64>,
    zc: Vec<f64>,
    cat_d: Vec<f64>,
    zd: Vec<f64>,
    cat_e: Vec<f64>,
    ze: Vec<f64>,
    d1: Vec<f64>,
}

impl ConvNet {
    pub fn new(height: usize, width: usize, channels: [usize; 2], time_dim: usize) -> Self {
        assert!(height % 4 == 0 && width % 4 == 0, "image sides must be divisible by 4");
        let [c1, c2] = channels;
        let mut next = 0;
        let mut conv = |cin: usize, cout: usize| {
            let layer = Conv3 {
                cin,
                cout,
                w: next,
                b: next + 9 * cin * cout,
            };
            next += 9 * cin * cout + cout;
            layer
        };
        let enc1 = conv(1, c1);
        let enc2 = conv(c1, c2);
        let mid = conv(c2, c2);
        let dec2 = conv(2 * c2, c1);
        let dec1 = conv(2 * c1, c1);
        let out = conv(c1, 1);
        let mut proj = |c: usize| {
            let p = TimeProj {
                c,
                w: next,
                b: next + time_dim * c,
            };
            next += time_dim * c + c;
            p
        };
        let proj = [proj(c1), proj(c2), proj(c2), proj(c1), proj(c1)];
        Self {
            height,
            width,
            c1,
            c2,
            time_dim,
            enc1,
            enc2,
            mid,
            dec2,
            dec1,
            out,
            proj,
            params: next,
        }
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn param_count(&self) -> usize {
        self.params
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.params];
        for layer in [self.enc1, self.enc2, self.mid, self.dec2, self.dec1, self.out] {
            let bound = 1.0 / ((9 * layer.cin) as f64).sqrt();
            for v in &mut params[layer.w..layer.b + layer.cout] {
                *v = rng.random_range(-bound..bound);
            }
        }
        for p in self.proj {
            let bound = 1.0 / (self.time_dim as f64).sqrt();
            for v in &mut params[p.w..p.b + p.c] {
                *v = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn zero_output(&self, params: &mut [f64]) {
        params[self.out.w..self.out.b + 1].iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn forward(&self, params: &[f64], xs: &[f64], ts: &[usize]) -> Vec<f64> {
        self.forward_cached(params, xs, ts).0
    }

    pub fn forward_cached(&self, params: &[f64], xs: &[f64], ts: &[usize]) -> (Vec<f64>, ConvCache) {
        let grid = Grid {
            images: ts.len(),
            h: self.height,
            w: self.width,
        };
        assert_eq!(xs.len(), grid.pixels(), "input images do not match timesteps");
        let temb = self.embed(ts);
        let half = grid.half();
        let quarter = half.half();

        let mut za = conv_forward(params, self.enc1, xs, grid);
        self.add_time(params, 0, &temb, &mut za, grid);
        let e1 = za.iter().map(|v| silu(*v)).collect::<Vec<_>>();
        let p1 = avg_pool(&e1, grid, self.c1);

        let mut zb = conv_forward(params, self.enc2, &p1, half);
        self.add_time(params, 1, &temb, &mut zb, half);
        let e2 = zb.iter().map(|v| silu(*v)).collect::<Vec<_>>();
        let p2 = avg_pool(&e2, half, self.c2);

        let mut zc = conv_forward(params, self.mid, &p2, quarter);
        self.add_time(params, 2, &temb, &mut zc, quarter);
        let m = zc.iter().map(|v| silu(*v)).collect::<Vec<_>>();

        let cat_d = concat(&upsample(&m, quarter, self.c2), self.c2, &e2, self.c2);
        let mut zd = conv_forward(params, self.dec2, &cat_d, half);
        self.add_time(params, 3, &temb, &mut zd, half);
        let d2 = zd.iter().map(|v| silu(*v)).collect::<Vec<_>>();

        let cat_e = concat(&upsample(&d2, half, self.c1), self.c1, &e1, self.c1);
        let mut ze = conv_forward(params, self.dec1, &cat_e, grid);
        self.add_time(params, 4, &temb, &mut ze, grid);
        let d1 = ze.iter().map(|v| silu(*v)).collect::<Vec<_>>();

        let out = conv_forward(params, self.out, &d1, grid);
        let cache = ConvCache {
            grid,
            x: xs.to_vec(),
            temb,
            za,
            p1,
            zb,
            p2,
            zc,
            cat_d,
            zd,
            cat_e,
            ze,
            d1,
        };
        (out, cache)
    }

    pub fn backward(&self, params: &[f64], cache: &ConvCache, d_out: &[f64], grad: &mut [f64]) {
        let grid = cache.grid;
        let half = grid.half();
        let quarter = half.half();
        let act_grad = |d: &mut Vec<f64>, z: &[f64]| {
            d.iter_mut().zip(z).for_each(|(g, z)| *g *= silu_grad(*z));
        };

        let mut d = conv_backward(params, self.out, &cache.d1, d_out, grid, grad, true);
        act_grad(&mut d, &cache.ze);
        self.time_backward(4, &cache.temb, &d, grid, grad);
        let d_cat = conv_backward(params, self.dec1, &cache.cat_e, &d, grid, grad, true);
        let (d_up1, d_skip1) = split(&d_cat, self.c1, self.c1);

        let mut d = upsample_backward(&d_up1, half, self.c1);
        act_grad(&mut d, &cache.zd);
        self.time_backward(3, &cache.temb, &d, half, grad);
        let d_cat = conv_backward(params, self.dec2, &cache.cat_d, &d, half, grad, true);
        let (d_up2, d_skip2) = split(&d_cat, self.c2, self.c2);

        let mut d = upsample_backward(&d_up2, quarter, self.c2);
        act_grad(&mut d, &cache.zc);
        self.time_backward(2, &cache.temb, &d, quarter, grad);
        let d_p2 = conv_backward(params, self.mid, &cache.p2, &d, quarter, grad, true);

        let mut d = avg_pool_backward(&d_p2, quarter, self.c2);
        d.iter_mut().zip(&d_skip2).for_each(|(a, b)| *a += b);
        act_grad(&mut d, &cache.zb);
        self.time_backward(1, &cache.temb, &d, half, grad);
        let d_p1 = conv_backward(params, self.enc2, &cache.p1, &d, half, grad, true);

        let mut d = avg_pool_backward(&d_p1, half, self.c1);
        d.iter_mut().zip(&d_skip1).for_each(|(a, b)| *a += b);
        act_grad(&mut d, &cache.za);
        self.time_backward(0, &cache.temb, &d, grid, grad);
        conv_backward(params, self.enc1, &cache.x, &d, grid, grad, false);
    }

    fn embed(&self, ts: &[usize]) -> Vec<f64> {
        let mut temb = vec![0.0; ts.len() * self.time_dim];
        for (row, t) in temb.chunks_mut(self.time_dim).zip(ts) {
            time_embedding(*t, self.time_dim, row);
        }
        temb
    }

    fn add_time(&self, params: &[f64], which: usize, temb: &[f64], z: &mut [f64], grid: Grid) {
        let p = self.proj[which];
        let mut shift = vec![0.0; grid.images * p.c];
        gemm(grid.images, self.time_dim, p.c, temb, false, &params[p.w..p.b], false, 0.0, &mut shift);
        add_bias(&mut shift, &params[p.b..p.b + p.c]);
        let per_image = grid.h * grid.w * p.c;
        for (img, block) in z.chunks_mut(per_image).enumerate() {
            add_bias(block, &shift[img * p.c..(img + 1) * p.c]);
        }
    }

    fn time_backward(&self, which: usize, temb: &[f64], dz: &[f64], grid: Grid, grad: &mut [f64]) {
        let p = self.proj[which];
        let per_image = grid.h * grid.w * p.c;
        let mut d_shift = vec![0.0; grid.images * p.c];
        for (img, block) in dz.chunks(per_image).enumerate() {
            col_sums(block, &mut d_shift[img * p.c..(img + 1) * p.c]);
        }
        gemm(self.time_dim, grid.images, p.c, temb, true, &d_shift, false, 1.0, &mut grad[p.w..p.b]);
        col_sums(&d_shift, &mut grad[p.b..p.b + p.c]);
    }
}

/// Upper bound on patch-matrix entries held at once.
const CHUNK_ENTRIES: usize = 1 << 18;

/// Consecutive image ranges whose patch matrices stay within [`CHUNK_ENTRIES`].
fn chunks(grid: Grid, k: usize) -> impl Iterator<Item = (usize, Grid)> {
    let step = (CHUNK_ENTRIES / (grid.h * grid.w * k).max(1)).max(1);
    (0..grid.images).step_by(step).map(move |i0| (i0, Grid { images: step.min(grid.images - i0), ..grid }))
}

/// `(pixels, 9 * c)` patch matrix with zero padding, written into `col`;
/// column `(ky * 3 + kx) * c + ch`.
fn im2col(input: &[f64], grid: Grid, c: usize, col: &mut Vec<f64>) {
    let Grid { images, h, w } = grid;
    col.clear();
    col.resize(grid.pixels() * 9 * c, 0.0);
    for img in 0..images {
        for y in 0..h {
            for x in 0..w {
                let row = ((img * h + y) * w + x) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((img * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        col[dst..dst + c].copy_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
    }
}

/// Adds the patch matrix back onto the image grid `out`.
fn col2im(col: &[f64], grid: Grid, c: usize, out: &mut [f64]) {
    let Grid { images, h, w } = grid;
    for img in 0..images {
        for y in 0..h {
            for x in 0..w {
                let row = ((img * h + y) * w + x) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((img * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for ch in 0..c {
                            out[dst + ch] += col[src + ch];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(params: &[f64], layer: Conv3, input: &[f64], grid: Grid) -> Vec<f64> {
    let k = 9 * layer.cin;
    let per = grid.h * grid.w;
    let mut z = vec![0.0; grid.pixels() * layer.cout];
    let mut col = Vec::new();
    for (i0, sub) in chunks(grid, k) {
        let n = sub.images;
        im2col(&input[i0 * per * layer.cin..(i0 + n) * per * layer.cin], sub, layer.cin, &mut col);
        let zs = &mut z[i0 * per * layer.cout..(i0 + n) * per * layer.cout];
        gemm(sub.pixels(), k, layer.cout, &col, false, &params[layer.weights()], false, 0.0, zs);
    }
    add_bias(&mut z, &params[layer.bias()]);
    z
}

fn conv_backward(
    params: &[f64],
    layer: Conv3,
    input: &[f64],
    dz: &[f64],
    grid: Grid,
    grad: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let k = 9 * layer.cin;
    let per = grid.h * grid.w;
    col_sums(dz, &mut grad[layer.bias()]);
    let mut d_in = if need_input_grad { vec![0.0; grid.pixels() * layer.cin] } else { Vec::new() };
    let (mut col, mut d_col) = (Vec::new(), Vec::new());
    for (i0, sub) in chunks(grid, k) {
        let n = sub.images;
        let dzs = &dz[i0 * per * layer.cout..(i0 + n) * per * layer.cout];
        im2col(&input[i0 * per * layer.cin..(i0 + n) * per * layer.cin], sub, layer.cin, &mut col);
        gemm(k, sub.pixels(), layer.cout, &col, true, dzs, false, 1.0, &mut grad[layer.weights()]);
        if need_input_grad {
            d_col.resize(sub.pixels() * k, 0.0);
            gemm(sub.pixels(), layer.cout, k, dzs, false, &params[layer.weights()], true, 0.0, &mut d_col);
            col2im(&d_col, sub, layer.cin, &mut d_in[i0 * per * layer.cin..(i0 + n) * per * layer.cin]);
        }
    }
    d_in
}

fn avg_pool(input: &[f64], grid: Grid, c: usize) -> Vec<f64> {
    let out_grid = grid.half();
    let mut out = vec![0.0; out_grid.pixels() * c];
    for img in 0..grid.images {
        for y in 0..grid.h {
            for x in 0..grid.w {
                let src = ((img * grid.h + y) * grid.w + x) * c;
                let dst = ((img * out_grid.h + y / 2) * out_grid.w + x / 2) * c;
                for ch in 0..c {
                    out[dst + ch] += 0.25 * input[src + ch];
                }
            }
        }
    }
    out
}

/// `grid` is the pooled (output) grid.
fn avg_pool_backward(d_out: &[f64], grid: Grid, c: usize) -> Vec<f64> {
    let (h, w) = (grid.h * 2, grid.w * 2);
    let mut d_in = vec![0.0; grid.images * h * w * c];
    for img in 0..grid.images {
        for y in 0..h {
            for x in 0..w {
                let dst = ((img * h + y) * w + x) * c;
                let src = ((img * grid.h + y / 2) * grid.w + x / 2) * c;
                for ch in 0..c {
                    d_in[dst + ch] = 0.25 * d_out[src + ch];
                }
            }
        }
    }
    d_in
}

/// Nearest-neighbour 2x upsampling; `grid` is the input grid.
fn upsample(input: &[f64], grid: Grid, c: usize) -> Vec<f64> {
    let (h, w) = (grid.h * 2, grid.w * 2);
    let mut out = vec![0.0; grid.images * h * w * c];
    for img in 0..grid.images {
        for y in 0..h {
            for x in 0..w {
                let dst = ((img * h + y) * w + x) * c;
                let src = ((img * grid.h + y / 2) * grid.w + x / 2) * c;
                out[dst..dst + c].copy_from_slice(&input[src..src + c]);
            }
        }
    }
    out
}

/// `grid` is the low-resolution grid the upsampling started from.
fn upsample_backward(d_out: &[f64], grid: Grid, c: usize) -> Vec<f64> {
    let (h, w) = (grid.h * 2, grid.w * 2);
    let mut d_in = vec![0.0; grid.pixels() * c];
    for img in 0..grid.images {
        for y in 0..h {
            for x in 0..w {
                let src = ((img * h + y) * w + x) * c;
                let dst = ((img * grid.h + y / 2) * grid.w + x / 2) * c;
                for ch in 0..c {
                    d_in[dst + ch] += d_out[src + ch];
                }
            }
        }
    }
    d_in
}

fn concat(a: &[f64], ca: usize, b: &[f64], cb: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.chunks(ca).zip(b.chunks(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    out
}

fn split(x: &[f64], ca: usize, cb: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / (ca + cb);
    let mut a = Vec::with_capacity(rows * ca);
    let mut b = Vec::with_capacity(rows * cb);
    for row in x.chunks(ca + cb) {
        a.extend_from_slice(&row[..ca]);
        b.extend_from_slice(&row[ca..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_zero_output() {
        let net = ConvNet::new(8, 8, [2, 3], 4);
        let mut p = net.init(&mut ChaCha8Rng::seed_from_u64(1));
        let xs = vec![0.5; 2 * 64];
        assert_eq!(net.forward(&p, &xs, &[3, 7]).len(), 128);
        net.zero_output(&mut p);
        assert!(net.forward(&p, &xs, &[3, 7]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        // Centre tap 1, all others 0: the convolution copies its input.
        let layer = Conv3 {
            cin: 1,
            cout: 1,
            w: 0,
            b: 9,
        };
        let mut params = vec![0.0; 10];
        params[4] = 1.0;
        let grid = Grid { images: 1, h: 4, w: 4 };
        let input: Vec<f64> = (0..16).map(|v| v as f64).collect();
        assert_eq!(conv_forward(&params, layer, &input, grid), input);
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let grid = Grid { images: 1, h: 4, w: 4 };
        let c = 2;
        let x: Vec<f64> = (0..32).map(|v| (v as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..8).map(|v| (v as f64 * 1.3).cos()).collect();
        let lhs: f64 = avg_pool(&x, grid, c).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(avg_pool_backward(&y, grid.half(), c)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs: f64 = upsample(&y, grid.half(), c).iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.iter().zip(upsample_backward(&x, grid.half(), c)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
