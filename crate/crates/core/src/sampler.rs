//! Ancestral sampling loops.
//!
//! Chains are processed in fixed-size blocks so that each network call is a
//! batched matrix product. Every chain owns three RNG streams derived from the
//! master seed and its index (initial state and ancestral noise, sharpening
//! probes, diagnostic probes), so results do not depend on how blocks are
//! scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::EpsModel;
use crate::error::{Error, Result};
use crate::metrics::LaplacianStats;
use crate::schedule::NoiseSchedule;
use crate::sharpening::{estimate_laplacian, EstimatorMode, SharpenStats, Sharpened};

/// A batched noise predictor as seen by the sampler.
pub trait Denoise: Sync {
    fn dim(&self) -> usize;

    /// The unsharpened model, used for diagnostics.
    fn model(&self) -> &dyn EpsModel;

    /// Prediction for each row of `xs`; `probes` holds one RNG per row.
    fn denoise(&self, xs: &[f64], t: usize, probes: &mut [ChaCha8Rng], stats: &mut SharpenStats) -> Vec<f64>;
}

/// Plain model predictions.
pub struct Vanilla<M>(pub M);

impl<M: EpsModel> Denoise for Vanilla<M> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn model(&self) -> &dyn EpsModel {
        &self.0
    }

    fn denoise(&self, xs: &[f64], t: usize, _: &mut [ChaCha8Rng], _: &mut SharpenStats) -> Vec<f64> {
        self.0.predict_batch(xs, t)
    }
}

impl<M: EpsModel> Denoise for Sharpened<M> {
    fn dim(&self) -> usize {
        self.model().dim()
    }

    fn model(&self) -> &dyn EpsModel {
        Sharpened::model(self)
    }

    fn denoise(&self, xs: &[f64], t: usize, probes: &mut [ChaCha8Rng], stats: &mut SharpenStats) -> Vec<f64> {
        self.denoise_batch(xs, t, probes, stats)
    }
}

/// Per-chain RNG streams.
#[derive(Debug, Clone)]
pub struct ChainStreams {
    pub noise: ChaCha8Rng,
    pub probe: ChaCha8Rng,
    pub diagnostic: ChaCha8Rng,
}

impl ChainStreams {
    pub fn derive(seed: u64, chain: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(3 * chain + k);
            rng
        };
        Self {
            noise: stream(0),
            probe: stream(1),
            diagnostic: stream(2),
        }
    }

    /// Initial state `x_T ~ N(0, I)` drawn from the noise stream.
    pub fn initial_state(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.noise.sample(StandardNormal)).collect()
    }
}

/// Laplacian recording on the unsharpened model, independent of sharpening.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplacianProbe {
    pub estimator: EstimatorMode,
    pub delta: f64,
    pub samples: usize,
    pub top_k: usize,
    /// Inclusive forward-timestep window for the frequency map.
    pub window: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordOptions {
    /// Keep every `stride`-th state (counted in sampling steps) plus the final one.
    pub snapshot_stride: Option<usize>,
    pub laplacian: Option<LaplacianProbe>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrajectory {
    pub chain: u64,
    /// `(forward t, state after the step at t)`, descending in `t`.
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub laplacian: Option<LaplacianStats>,
    pub sample: Vec<f64>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub trajectories: Vec<SampleTrajectory>,
    pub stats: SharpenStats,
    pub aborted: usize,
}

impl BatchResult {
    /// Final samples of the chains that completed, row-major.
    pub fn samples(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .filter(|t| t.aborted.is_none())
            .flat_map(|t| t.sample.iter().copied())
            .collect()
    }
}

struct Chain {
    id: u64,
    streams: ChainStreams,
    traj: SampleTrajectory,
}

fn run_block<D: Denoise + ?Sized>(
    denoise: &D,
    sched: &NoiseSchedule,
    mut chains: Vec<Chain>,
    mut xs: Vec<f64>,
    record: &RecordOptions,
    stats: &mut SharpenStats,
) -> Vec<SampleTrajectory> {
    let dim = denoise.dim();
    let steps = sched.steps();
    let mut done = Vec::with_capacity(chains.len());
    let mut probes: Vec<ChaCha8Rng> = chains.iter().map(|c| c.streams.probe.clone()).collect();
    let mut z = vec![0.0; dim];
    for t in (0..steps).rev() {
        if chains.is_empty() {
            break;
        }
        let eps = denoise.denoise(&xs, t, &mut probes, stats);
        if let Some(probe) = &record.laplacian {
            let model = denoise.model();
            let base = model.predict_batch(&xs, t);
            let mut rngs: Vec<ChaCha8Rng> = chains.iter().map(|c| c.streams.diagnostic.clone()).collect();
            let lap = estimate_laplacian(model, &xs, &base, t, probe.estimator, probe.delta, probe.samples, &mut rngs);
            for ((chain, rng), l) in chains.iter_mut().zip(rngs).zip(lap.chunks(dim)) {
                chain.streams.diagnostic = rng;
                if let Some(s) = chain.traj.laplacian.as_mut() {
                    if l.iter().all(|v| v.is_finite()) {
                        s.update(l, t);
                    }
                }
            }
        }
        let step_index = steps - 1 - t;
        let mut i = 0;
        while i < chains.len() {
            let x = &mut xs[i * dim..(i + 1) * dim];
            if t > 0 {
                for v in z.iter_mut() {
                    *v = chains[i].streams.noise.sample(StandardNormal);
                }
            }
            sched.reverse_step_in_place(x, t, &eps[i * dim..(i + 1) * dim], &z);
            if x.iter().any(|v| !v.is_finite()) {
                let mut chain = chains.remove(i);
                probes.remove(i);
                chain.traj.sample = xs.drain(i * dim..(i + 1) * dim).collect();
                chain.traj.aborted = Some(format!("non-finite state at t={t}"));
                done.push(chain.traj);
                continue;
            }
            if let Some(stride) = record.snapshot_stride {
                if step_index % stride.max(1) == 0 || t == 0 {
                    chains[i].traj.snapshots.push((t, x.to_vec()));
                }
            }
            i += 1;
        }
    }
    for (i, mut chain) in chains.into_iter().enumerate() {
        chain.traj.sample = xs[i * dim..(i + 1) * dim].to_vec();
        debug_assert_eq!(chain.traj.chain, chain.id);
        done.push(chain.traj);
    }
    done.sort_by_key(|t| t.chain);
    done
}

fn new_chain(id: u64, streams: ChainStreams, dim: usize, steps: usize, record: &RecordOptions) -> Chain {
    let laplacian = record
        .laplacian
        .map(|p| LaplacianStats::new(dim, steps, p.top_k, p.window));
    Chain {
        id,
        streams,
        traj: SampleTrajectory {
            chain: id,
            snapshots: Vec::new(),
            laplacian,
            sample: Vec::new(),
            aborted: None,
        },
    }
}

/// Runs one chain from `x_t` (the state at the noisiest step) down to `t = 0`.
pub fn sample_chain<D: Denoise + ?Sized>(
    denoise: &D,
    sched: &NoiseSchedule,
    x_t: Vec<f64>,
    chain: u64,
    streams: ChainStreams,
    record: &RecordOptions,
    stats: &mut SharpenStats,
) -> Result<SampleTrajectory> {
    if x_t.len() != denoise.dim() {
        return Err(Error::Dimension {
            expected: denoise.dim(),
            got: x_t.len(),
        });
    }
    let c = new_chain(chain, streams, denoise.dim(), sched.steps(), record);
    Ok(run_block(denoise, sched, vec![c], x_t, record, stats).remove(0))
}

#[derive(Debug, Clone, Copy)]
pub struct BatchOptions {
    /// Chains per batched network call.
    pub block_size: usize,
    /// Index of the first chain; chain `i` of the batch uses streams of `first_chain + i`.
    pub first_chain: u64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            block_size: 256,
            first_chain: 0,
        }
    }
}

/// Runs `n` independent chains. Fails if more than 1% of them abort.
pub fn sample_batch<D: Denoise + ?Sized>(
    denoise: &D,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
    record: &RecordOptions,
    opts: BatchOptions,
) -> Result<BatchResult> {
    if n == 0 {
        return Err(Error::config("sample count must be at least 1"));
    }
    let dim = denoise.dim();
    let block = opts.block_size.max(1);
    let starts: Vec<usize> = (0..n).step_by(block).collect();
    let blocks: Vec<(Vec<SampleTrajectory>, SharpenStats)> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + block).min(n);
            let mut xs = Vec::with_capacity((end - start) * dim);
            let chains = (start..end)
                .map(|i| {
                    let id = opts.first_chain + i as u64;
                    let mut streams = ChainStreams::derive(seed, id);
                    xs.extend(streams.initial_state(dim));
                    new_chain(id, streams, dim, sched.steps(), record)
                })
                .collect();
            let mut stats = SharpenStats::default();
            let trajs = run_block(denoise, sched, chains, xs, record, &mut stats);
            (trajs, stats)
        })
        .collect();
    let mut trajectories = Vec::with_capacity(n);
    let mut stats = SharpenStats::default();
    for (t, s) in blocks {
        trajectories.extend(t);
        stats.merge(&s);
    }
    let aborted = trajectories.iter().filter(|t| t.aborted.is_some()).count();
    if aborted * 100 > n {
        return Err(Error::Batch { failed: aborted, total: n });
    }
    Ok(BatchResult {
        trajectories,
        stats,
        aborted,
    })
}
