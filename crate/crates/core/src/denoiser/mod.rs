//! Trainable ε-prediction networks, their training loop and checkpoints.

mod adam;
mod conv;
pub mod linalg;
mod mlp;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use conv::ConvNet;
pub use mlp::Mlp;

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

/// Anything that predicts the noise ε for a batch of states at a shared
/// timestep. `xs` is row-major `(n, dim)`; the result has the same shape.
pub trait EpsModel: Sync {
    fn dim(&self) -> usize;
    fn predict_batch(&self, xs: &[f64], t: usize) -> Vec<f64>;
}

impl<M: EpsModel + ?Sized> EpsModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict_batch(&self, xs: &[f64], t: usize) -> Vec<f64> {
        (**self).predict_batch(xs, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    Mlp {
        dim: usize,
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_time_dim")]
        time_embed_dim: usize,
    },
    Conv {
        height: usize,
        width: usize,
        #[serde(default = "default_channels")]
        channels: [usize; 2],
        #[serde(default = "default_time_dim")]
        time_embed_dim: usize,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

fn default_time_dim() -> usize {
    32
}

fn default_channels() -> [usize; 2] {
    [32, 64]
}

impl ArchSpec {
    pub fn mlp(dim: usize) -> Self {
        ArchSpec::Mlp {
            dim,
            hidden: default_hidden(),
            time_embed_dim: default_time_dim(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ArchSpec::Mlp { dim, .. } => *dim,
            ArchSpec::Conv { height, width, .. } => height * width,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ArchSpec::Mlp {
                dim,
                hidden,
                time_embed_dim,
            } => {
                if *dim == 0 || hidden.contains(&0) || *time_embed_dim < 2 {
                    return Err(Error::config("mlp needs dim >= 1, nonzero widths, time_embed_dim >= 2"));
                }
            }
            ArchSpec::Conv {
                height,
                width,
                channels,
                time_embed_dim,
            } => {
                if height % 4 != 0 || width % 4 != 0 || *height == 0 || *width == 0 {
                    return Err(Error::config("conv image sides must be positive multiples of 4"));
                }
                if channels.contains(&0) || *time_embed_dim < 2 {
                    return Err(Error::config("conv needs nonzero channels and time_embed_dim >= 2"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Mlp(Mlp),
    Conv(ConvNet),
}

/// A network together with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    spec: ArchSpec,
    body: Body,
    params: Vec<f64>,
}

enum Cache {
    Mlp(mlp::MlpCache),
    Conv(conv::ConvCache),
}

impl DenoiserNet {
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let body = match &spec {
            ArchSpec::Mlp {
                dim,
                hidden,
                time_embed_dim,
            } => Body::Mlp(Mlp::new(*dim, hidden, *time_embed_dim)),
            ArchSpec::Conv {
                height,
                width,
                channels,
                time_embed_dim,
            } => Body::Conv(ConvNet::new(*height, *width, *channels, *time_embed_dim)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match &body {
            Body::Mlp(m) => m.init(&mut rng),
            Body::Conv(c) => c.init(&mut rng),
        };
        Ok(Self { spec, body, params })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn zero_output_layer(&mut self) {
        match &self.body {
            Body::Mlp(m) => m.zero_output(&mut self.params),
            Body::Conv(c) => c.zero_output(&mut self.params),
        }
    }

    /// Forward pass with a per-row timestep.
    pub fn forward(&self, xs: &[f64], ts: &[usize]) -> Vec<f64> {
        match &self.body {
            Body::Mlp(m) => m.forward(&self.params, xs, ts),
            Body::Conv(c) => c.forward(&self.params, xs, ts),
        }
    }

    pub fn predict_eps(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.forward(x, &[t]))
    }

    /// Mean over rows of `|net(x_t, t) - eps|^2` and its parameter gradient.
    pub fn loss_and_grad(&self, xs: &[f64], ts: &[usize], eps: &[f64]) -> (f64, Vec<f64>) {
        let (out, cache) = match &self.body {
            Body::Mlp(m) => {
                let (o, c) = m.forward_cached(&self.params, xs, ts);
                (o, Cache::Mlp(c))
            }
            Body::Conv(c) => {
                let (o, k) = c.forward_cached(&self.params, xs, ts);
                (o, Cache::Conv(k))
            }
        };
        let rows = ts.len() as f64;
        let mut loss = 0.0;
        let d_out: Vec<f64> = out
            .iter()
            .zip(eps)
            .map(|(o, e)| {
                let r = o - e;
                loss += r * r;
                2.0 * r / rows
            })
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        match (&self.body, &cache) {
            (Body::Mlp(m), Cache::Mlp(c)) => m.backward(&self.params, c, &d_out, &mut grad),
            (Body::Conv(n), Cache::Conv(c)) => n.backward(&self.params, c, &d_out, &mut grad),
            _ => unreachable!(),
        }
        (loss / rows, grad)
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, xs: &[f64], ts: &[usize], eps: &[f64]) -> f64 {
        let out = self.forward(xs, ts);
        out.iter().zip(eps).map(|(o, e)| (o - e) * (o - e)).sum::<f64>() / ts.len() as f64
    }
}

impl EpsModel for DenoiserNet {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn predict_batch(&self, xs: &[f64], t: usize) -> Vec<f64> {
        let rows = xs.len() / self.dim();
        self.forward(xs, &vec![t; rows])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::config("training needs lr > 0 and batch_size >= 1"));
        }
        Ok(())
    }
}

/// Minimizes the denoising loss over `data` (row-major, `net.dim()` columns)
/// with Adam. Returns the mean loss of every epoch. `on_epoch` is called after
/// each epoch with its index and the current network.
pub fn train<F>(
    net: &mut DenoiserNet,
    data: &[f64],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, &DenoiserNet, f64),
{
    cfg.validate()?;
    let dim = net.dim();
    if data.is_empty() || data.len() % dim != 0 {
        return Err(Error::config("training data must be a nonempty multiple of the model dimension"));
    }
    let rows = data.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(net.param_count(), cfg.lr);
    let mut order: Vec<usize> = (0..rows).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let ts: Vec<usize> = (0..n).map(|_| rng.random_range(0..sched.steps())).collect();
            let eps: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
            let mut xs = Vec::with_capacity(n * dim);
            for (i, row) in chunk.iter().enumerate() {
                let x0 = &data[row * dim..(row + 1) * dim];
                xs.extend(sched.q_sample(x0, ts[i], &eps[i * dim..(i + 1) * dim])?);
            }
            let (loss, grad) = net.loss_and_grad(&xs, &ts, &eps);
            if !loss.is_finite() {
                return Err(Error::Training { epoch, step, loss });
            }
            opt.step(&mut net.params, &grad);
            total += loss;
            batches += 1;
            step += 1;
        }
        let mean = total / batches as f64;
        curve.push(mean);
        on_epoch(epoch, net, mean);
    }
    Ok(curve)
}

const CHECKPOINT_FORMAT: &str = "sharpscore-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk layout of a trained network (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub arch: ArchSpec,
    pub schedule: ScheduleConfig,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(net: &DenoiserNet, schedule: &ScheduleConfig) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            arch: net.spec.clone(),
            schedule: schedule.clone(),
            params: net.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported format {} v{}", ckpt.format, ckpt.version)));
        }
        Ok(ckpt)
    }

    pub fn into_net(self) -> Result<DenoiserNet> {
        let mut net = DenoiserNet::new(self.arch, 0)?;
        if net.params.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: net.params.len(),
                got: self.params.len(),
            });
        }
        net.params = self.params;
        Ok(net)
    }
}
