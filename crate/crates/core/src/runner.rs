//! Experiment orchestration: turns a resolved config into a run directory of
//! CSV tables, plots and a checkpoint.
//!
//! Every run directory holds `config.toml` (the resolved config) and
//! `metrics.csv` with rows `(run_id, metric, value, config_hash)`. A failed
//! run also gets `error.json` naming the stage that failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DenoiserSource, EvolutionSpec, ExperimentConfig, ExperimentKind};
use crate::denoiser::{train, Checkpoint, DenoiserNet, EpsModel};
use crate::error::{Error, Result};
use crate::gmm::{GaussianMixture, OracleModel};
use crate::metrics::{im_count, l1_distance, HistogramSpec, LaplacianStats};
use crate::plot;
use crate::sampler::{sample_batch, BatchOptions, BatchResult, LaplacianProbe, RecordOptions, Vanilla};
use crate::schedule::NoiseSchedule;
use crate::shapes::{self, classify, label_counts, Label, ShapesImage};
use crate::sharpening::{estimate_laplacian, hutchinson_laplacian, EstimatorMode, Sharpened};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub run_id: String,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
}

/// Collects named scalar results of a run.
#[derive(Debug, Clone)]
pub struct Metrics {
    run_id: String,
    hash: String,
    rows: Vec<MetricRow>,
}

impl Metrics {
    fn new(run_id: String, hash: String) -> Self {
        Self {
            run_id,
            hash,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: impl Into<String>, value: f64) {
        let metric = metric.into();
        info!("{metric} = {value}");
        self.rows.push(MetricRow {
            run_id: self.run_id.clone(),
            metric,
            value,
            config_hash: self.hash.clone(),
        });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_csv(&dir.join("metrics.csv"), &self.rows)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub metrics: Metrics,
}

#[derive(Serialize)]
struct ErrorManifest<'a> {
    stage: &'a str,
    error: String,
    config_hash: String,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the experiment described by `cfg` into `cfg.run_dir()`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    let run_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut metrics = Metrics::new(run_id, cfg.hash());
    let mut stage = "setup";
    let result = match cfg.kind {
        ExperimentKind::Toy1d | ExperimentKind::Toy2d => run_toy(cfg, &dir, &mut metrics, &mut stage),
        ExperimentKind::ScoreEvolution => run_score_evolution(cfg, &dir, &mut metrics, &mut stage),
        ExperimentKind::Shapes => run_shapes(cfg, &dir, &mut metrics, &mut stage),
        ExperimentKind::EstimatorBench => run_estimator_bench(cfg, &dir, &mut metrics, &mut stage),
    };
    let result = result.and_then(|()| metrics.write(&dir));
    if let Err(e) = result {
        let manifest = ErrorManifest {
            stage,
            error: e.to_string(),
            config_hash: cfg.hash(),
        };
        // The original error matters more than a failure to record it.
        let _ = metrics.write(&dir);
        let _ = fs::write(dir.join("error.json"), serde_json::to_string_pretty(&manifest)?);
        return Err(e);
    }
    Ok(RunOutcome { dir, metrics })
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

/// Loads the configured checkpoint, or trains a fresh network on `data` and
/// saves it (with its loss curve) into `dir`.
pub fn obtain_network(cfg: &ExperimentConfig, data: &[f64], sched: &NoiseSchedule, dir: &Path, metrics: &mut Metrics) -> Result<DenoiserNet> {
    if let Some(path) = &cfg.checkpoint {
        let ck = Checkpoint::load(path)?;
        if ck.arch != cfg.model {
            return Err(Error::Checkpoint {
                path: path.clone(),
                msg: "architecture differs from the config".into(),
            });
        }
        if ck.schedule != cfg.schedule {
            warn!("checkpoint {} was trained with a different schedule", path.display());
        }
        return ck.into_net();
    }
    let mut net = DenoiserNet::new(cfg.model.clone(), cfg.seed.wrapping_add(cfg.training.seed))?;
    let started = Instant::now();
    let epochs = cfg.training.epochs;
    let curve = train(&mut net, data, sched, &cfg.training.optimizer(), |e, _, loss| {
        if e % 50 == 0 || e + 1 == epochs {
            info!("epoch {e}: loss {loss:.5}");
        }
    })?;
    metrics.push("train_seconds", started.elapsed().as_secs_f64());
    metrics.push("train_baseline_loss", net.dim() as f64);
    if let Some(last) = curve.last() {
        metrics.push("train_final_loss", *last);
    }
    let rows: Vec<LossRow> = curve.iter().enumerate().map(|(epoch, &loss)| LossRow { epoch, loss }).collect();
    write_csv(&dir.join("loss.csv"), &rows)?;
    if !curve.is_empty() {
        let pts: Vec<(f64, f64)> = curve.iter().enumerate().map(|(i, l)| (i as f64, *l)).collect();
        plot::line_plot(&dir.join("loss.png"), &[&pts])?;
    }
    Checkpoint::new(&net, &cfg.schedule).save(&dir.join("checkpoint.json"))?;
    Ok(net)
}

fn toy_data(cfg: &ExperimentConfig, gm: &GaussianMixture) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    gm.sample_with(cfg.training.data_size, &mut rng)
}

fn reference_samples(cfg: &ExperimentConfig, gm: &GaussianMixture) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    gm.sample_with(cfg.samples, &mut rng)
}

/// Vanilla and sharpened batches of the toy experiments, with their reference sample.
#[derive(Debug, Clone)]
pub struct ToyResult {
    pub vanilla: BatchResult,
    pub sharpened: BatchResult,
    pub reference: Vec<f64>,
    pub modes: Vec<Vec<f64>>,
    pub im_threshold: f64,
}

impl ToyResult {
    pub fn im_counts(&self) -> (usize, usize, usize) {
        let c = |s: &[f64]| im_count(s, &self.modes, self.im_threshold);
        (c(&self.vanilla.samples()), c(&self.sharpened.samples()), c(&self.reference))
    }

    pub fn l1(&self) -> (f64, f64) {
        let spec = HistogramSpec::for_modes(&self.modes);
        (
            l1_distance(&self.vanilla.samples(), &self.reference, &spec),
            l1_distance(&self.sharpened.samples(), &self.reference, &spec),
        )
    }
}

/// Samples `cfg.samples` paired vanilla and sharpened chains from `model`.
pub fn sample_toy<M: EpsModel>(cfg: &ExperimentConfig, gm: &GaussianMixture, model: &M, sched: &NoiseSchedule) -> Result<ToyResult> {
    let record = RecordOptions::default();
    let opts = BatchOptions::default();
    let started = Instant::now();
    let vanilla = sample_batch(&Vanilla(model), sched, cfg.samples, cfg.seed, &record, opts)?;
    info!("vanilla sampling took {:.1}s", started.elapsed().as_secs_f64());
    let started = Instant::now();
    let sharp = Sharpened::new(model, cfg.sharpening)?;
    let sharpened = sample_batch(&sharp, sched, cfg.samples, cfg.seed, &record, opts)?;
    info!("sharpened sampling took {:.1}s", started.elapsed().as_secs_f64());
    Ok(ToyResult {
        vanilla,
        sharpened,
        reference: reference_samples(cfg, gm),
        modes: gm.means(),
        im_threshold: cfg.im_threshold()?,
    })
}

#[derive(Serialize)]
struct SampleRow {
    variant: &'static str,
    index: usize,
    x: f64,
    y: Option<f64>,
}

#[derive(Serialize)]
struct ImRow {
    variant: &'static str,
    im_count: usize,
    samples: usize,
    threshold: f64,
}

#[derive(Serialize)]
struct L1Row {
    variant: &'static str,
    l1_to_reference: f64,
}

#[derive(Serialize)]
struct HistRow {
    center: f64,
    reference: f64,
    vanilla: f64,
    sharpened: f64,
}

fn run_toy(cfg: &ExperimentConfig, dir: &Path, metrics: &mut Metrics, stage: &mut &'static str) -> Result<()> {
    let gm = cfg.mixture.as_ref().expect("validated").build()?;
    let sched = cfg.schedule.build()?;
    *stage = "model";
    let res = match cfg.denoiser {
        DenoiserSource::Oracle => {
            *stage = "sampling";
            sample_toy(cfg, &gm, &OracleModel::new(&gm, &sched), &sched)?
        }
        DenoiserSource::Network => {
            *stage = "training";
            let net = obtain_network(cfg, &toy_data(cfg, &gm), &sched, dir, metrics)?;
            *stage = "sampling";
            sample_toy(cfg, &gm, &net, &sched)?
        }
    };
    *stage = "metrics";
    write_toy_outputs(&res, dir, metrics)
}

fn write_toy_outputs(res: &ToyResult, dir: &Path, metrics: &mut Metrics) -> Result<()> {
    let dim = res.modes[0].len();
    let (iv, is, ir) = res.im_counts();
    let (lv, ls) = res.l1();
    let sets: [(&'static str, Vec<f64>); 3] = [
        ("vanilla", res.vanilla.samples()),
        ("sharpened", res.sharpened.samples()),
        ("reference", res.reference.clone()),
    ];
    metrics.push("im_threshold", res.im_threshold);
    metrics.push("im_count_vanilla", iv as f64);
    metrics.push("im_count_sharpened", is as f64);
    metrics.push("im_count_reference", ir as f64);
    metrics.push("l1_vanilla", lv);
    metrics.push("l1_sharpened", ls);
    metrics.push("aborted_vanilla", res.vanilla.aborted as f64);
    metrics.push("aborted_sharpened", res.sharpened.aborted as f64);
    metrics.push("sharpened_steps", res.sharpened.stats.gated as f64);
    metrics.push("sharpen_fallbacks", res.sharpened.stats.fallbacks as f64);
    if let Some(r) = res.sharpened.stats.eps_to_laplacian_ratio() {
        metrics.push("eps_to_laplacian_ratio", r);
    }

    let im_rows: Vec<ImRow> = sets
        .iter()
        .zip([iv, is, ir])
        .map(|((variant, s), im_count)| ImRow {
            variant,
            im_count,
            samples: s.len() / dim,
            threshold: res.im_threshold,
        })
        .collect();
    write_csv(&dir.join("im_counts.csv"), &im_rows)?;
    write_csv(
        &dir.join("l1.csv"),
        &[
            L1Row {
                variant: "vanilla",
                l1_to_reference: lv,
            },
            L1Row {
                variant: "sharpened",
                l1_to_reference: ls,
            },
        ],
    )?;

    let mut rows = Vec::new();
    for (variant, s) in &sets {
        for (index, p) in s.chunks(dim).enumerate() {
            rows.push(SampleRow {
                variant,
                index,
                x: p[0],
                y: p.get(1).copied(),
            });
        }
    }
    write_csv(&dir.join("samples.csv"), &rows)?;

    let spec = HistogramSpec::for_modes(&res.modes);
    if dim == 1 {
        let axis = spec.axes[0];
        let h: Vec<Vec<f64>> = sets.iter().map(|(_, s)| spec.histogram(s)).collect();
        let rows: Vec<HistRow> = (0..axis.bins)
            .map(|i| HistRow {
                center: axis.center(i),
                vanilla: h[0][i],
                sharpened: h[1][i],
                reference: h[2][i],
            })
            .collect();
        write_csv(&dir.join("histogram.csv"), &rows)?;
        plot::histogram_plot(&dir.join("histogram.png"), &[&h[2], &h[0], &h[1]], axis.lo, axis.hi)?;
    } else if dim == 2 {
        let (x, y) = (spec.axes[0], spec.axes[1]);
        plot::scatter_plot(&dir.join("scatter.png"), &[&sets[2].1, &sets[0].1, &sets[1].1], (x.lo, x.hi), (y.lo, y.hi))?;
        for (variant, s) in &sets {
            let h = spec.histogram(s);
            plot::heatmap(&dir.join(format!("density_{variant}.png")), &flip_rows(&h, y.bins, x.bins), y.bins, x.bins, 4)?;
        }
    }
    Ok(())
}

/// Histograms have the first axis fastest and y increasing; images have y down.
fn flip_rows(h: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows).rev().flat_map(|r| h[r * cols..(r + 1) * cols].iter().copied()).collect()
}

/// Noise predictions turned into scores on a 1D grid at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvolutionRow {
    pub t: usize,
    pub x: f64,
    pub true_score: f64,
    pub vanilla_score: f64,
    pub sharpened_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvolutionSummary {
    pub t: usize,
    /// Mean `|vanilla - true|` over the inter-mode grid points.
    pub vanilla_deviation: f64,
    pub sharpened_deviation: f64,
    /// `||sharpened - vanilla||_2` over the whole grid.
    pub sharpening_change: f64,
}

/// Vanilla, sharpened (gate ignored: sharpening is applied at every listed
/// timestep) and true scores of a 1D model on the configured grid.
pub fn score_evolution<M: EpsModel>(
    model: &M,
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    alpha: f64,
    delta: f64,
    spec: &EvolutionSpec,
) -> Result<(Vec<EvolutionRow>, Vec<EvolutionSummary>)> {
    if model.dim() != 1 || gm.dim() != 1 {
        return Err(Error::config("score evolution needs a 1D model and mixture"));
    }
    let (lo, hi) = spec.grid_range;
    let n = spec.grid_points;
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &t in &spec.timesteps {
        let scale = sched.noise_scale(t);
        let noised = gm.noised(t, sched)?;
        let eps = model.predict_batch(&xs, t);
        let lap = estimate_laplacian(model, &xs, &eps, t, EstimatorMode::Fd1d, delta, 1, &mut []);
        let mut dv = (0.0, 0.0, 0usize);
        let mut change = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let truth = noised.score(&[x])[0];
            let van = -eps[i] / scale;
            let sh = -(eps[i] - alpha * lap[i]) / scale;
            change += (sh - van) * (sh - van);
            if spec.inter_mode.iter().any(|&(a, b)| a < x && x < b) {
                dv.0 += (van - truth).abs();
                dv.1 += (sh - truth).abs();
                dv.2 += 1;
            }
            rows.push(EvolutionRow {
                t,
                x,
                true_score: truth,
                vanilla_score: van,
                sharpened_score: sh,
            });
        }
        let k = dv.2.max(1) as f64;
        summary.push(EvolutionSummary {
            t,
            vanilla_deviation: dv.0 / k,
            sharpened_deviation: dv.1 / k,
            sharpening_change: change.sqrt(),
        });
    }
    Ok((rows, summary))
}

fn run_score_evolution(cfg: &ExperimentConfig, dir: &Path, metrics: &mut Metrics, stage: &mut &'static str) -> Result<()> {
    let gm = cfg.mixture.as_ref().expect("validated").build()?;
    let sched = cfg.schedule.build()?;
    let spec = cfg.evolution.as_ref().expect("validated");
    *stage = "model";
    let (rows, summary) = match cfg.denoiser {
        DenoiserSource::Oracle => {
            score_evolution(&OracleModel::new(&gm, &sched), &gm, &sched, cfg.sharpening.alpha, cfg.sharpening.delta, spec)?
        }
        DenoiserSource::Network => {
            if cfg.checkpoint.is_none() {
                return Err(Error::config(
                    "score-evolution needs `checkpoint` pointing at a trained 1D network (see `sharpscore run`)",
                ));
            }
            let net = obtain_network(cfg, &[], &sched, dir, metrics)?;
            score_evolution(&net, &gm, &sched, cfg.sharpening.alpha, cfg.sharpening.delta, spec)?
        }
    };
    *stage = "outputs";
    write_csv(&dir.join("score_evolution.csv"), &rows)?;
    write_csv(&dir.join("score_evolution_summary.csv"), &summary)?;
    for s in &summary {
        metrics.push(format!("deviation_vanilla_t{}", s.t), s.vanilla_deviation);
        metrics.push(format!("deviation_sharpened_t{}", s.t), s.sharpened_deviation);
        metrics.push(format!("sharpening_change_t{}", s.t), s.sharpening_change);
        let pick = |f: fn(&EvolutionRow) -> f64| -> Vec<(f64, f64)> {
            rows.iter().filter(|r| r.t == s.t).map(|r| (r.x, f(r))).collect()
        };
        let (tr, va, sh) = (pick(|r| r.true_score), pick(|r| r.vanilla_score), pick(|r| r.sharpened_score));
        plot::line_plot(&dir.join(format!("score_t{}.png", s.t)), &[&tr, &va, &sh])?;
    }
    Ok(())
}

#[derive(Serialize)]
struct LabelRow {
    variant: &'static str,
    chain: u64,
    label: Label,
    vertices: String,
}

#[derive(Serialize)]
struct TableRow {
    label: String,
    vanilla_percent: f64,
    sharpened_percent: f64,
}

#[derive(Serialize)]
struct CurveRow {
    chain: u64,
    label: Label,
    t: usize,
    mean_top_k: f64,
}

#[derive(Serialize)]
struct FrequencyRow {
    chain: u64,
    label: Label,
    row: usize,
    col: usize,
    count: u32,
    window_steps: u32,
}

/// Maps model space `[-1, 1]` to pixel intensities.
pub fn to_image(sample: &[f64], h: usize, w: usize) -> ShapesImage {
    let px = sample.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    ShapesImage::from_pixels(h, w, px).expect("sample size matches canvas")
}

fn run_shapes(cfg: &ExperimentConfig, dir: &Path, metrics: &mut Metrics, stage: &mut &'static str) -> Result<()> {
    let spec = cfg.shapes.as_ref().expect("validated");
    let (h, w) = (spec.generator.height, spec.generator.width);
    let sched = cfg.schedule.build()?;

    *stage = "dataset";
    let images = shapes::generate_dataset(cfg.training.data_size, &spec.generator, cfg.seed)?;
    let preview: Vec<&[f64]> = images.iter().take(64).map(|i| i.pixels.as_slice()).collect();
    plot::image_grid(&dir.join("dataset_preview.png"), &preview, h, w, 8, 3)?;
    let data: Vec<f64> = images.iter().flat_map(|i| i.pixels.iter().map(|p| 2.0 * p - 1.0)).collect();
    drop(images);

    *stage = "training";
    let net = obtain_network(cfg, &data, &sched, dir, metrics)?;
    drop(data);

    *stage = "sampling";
    let record = RecordOptions::default();
    let opts = BatchOptions {
        block_size: 64,
        first_chain: 0,
    };
    let started = Instant::now();
    let vanilla = sample_batch(&Vanilla(&net), &sched, cfg.samples, cfg.seed, &record, opts)?;
    metrics.push("vanilla_sampling_seconds", started.elapsed().as_secs_f64());
    let started = Instant::now();
    let sharp = Sharpened::new(&net, cfg.sharpening)?;
    let sharpened = sample_batch(&sharp, &sched, cfg.samples, cfg.seed, &record, opts)?;
    metrics.push("sharpened_sampling_seconds", started.elapsed().as_secs_f64());
    if let Some(r) = sharpened.stats.eps_to_laplacian_ratio() {
        metrics.push("eps_to_laplacian_ratio", r);
    }

    *stage = "classification";
    let mut label_rows = Vec::new();
    let mut per_variant = Vec::new();
    for (variant, batch) in [("vanilla", &vanilla), ("sharpened", &sharpened)] {
        let sample_dir = dir.join("samples").join(variant);
        fs::create_dir_all(&sample_dir)?;
        let mut labels = Vec::new();
        for tr in batch.trajectories.iter().filter(|t| t.aborted.is_none()) {
            let img = to_image(&tr.sample, h, w);
            shapes::write_pgm(&sample_dir.join(format!("chain_{:05}.pgm", tr.chain)), &img)?;
            let c = classify(&img, &spec.classifier);
            labels.push((tr.chain, c.label));
            label_rows.push(LabelRow {
                variant,
                chain: tr.chain,
                label: c.label,
                vertices: c.components.iter().map(|c| c.vertices.to_string()).collect::<Vec<_>>().join(";"),
            });
        }
        let preview: Vec<&[f64]> = batch.trajectories.iter().take(64).map(|t| t.sample.as_slice()).collect();
        let preview: Vec<Vec<f64>> = preview.iter().map(|s| to_image(s, h, w).pixels).collect();
        let refs: Vec<&[f64]> = preview.iter().map(|p| p.as_slice()).collect();
        plot::image_grid(&dir.join(format!("samples_{variant}.png")), &refs, h, w, 8, 3)?;
        per_variant.push(labels);
    }
    write_csv(&dir.join("labels.csv"), &label_rows)?;
    let pct = |labels: &[(u64, Label)]| {
        let only: Vec<Label> = labels.iter().map(|l| l.1).collect();
        let n = only.len().max(1) as f64;
        label_counts(&only).map(|c| 100.0 * c as f64 / n)
    };
    let (pv, ps) = (pct(&per_variant[0]), pct(&per_variant[1]));
    let table: Vec<TableRow> = Label::ALL
        .iter()
        .enumerate()
        .map(|(i, l)| TableRow {
            label: l.to_string(),
            vanilla_percent: pv[i],
            sharpened_percent: ps[i],
        })
        .collect();
    write_csv(&dir.join("label_table.csv"), &table)?;
    for (i, l) in Label::ALL.iter().enumerate() {
        let key = format!("{l:?}").to_lowercase();
        metrics.push(format!("percent_{key}_vanilla"), pv[i]);
        metrics.push(format!("percent_{key}_sharpened"), ps[i]);
    }

    *stage = "laplacian";
    let probe = LaplacianProbe {
        estimator: EstimatorMode::Hutchinson,
        delta: cfg.sharpening.delta,
        samples: cfg.sharpening.hutchinson_samples,
        top_k: cfg.metrics.top_k,
        window: cfg.metrics.laplacian_window,
    };
    let mut picks: Vec<(u64, Label)> = Vec::new();
    for want in [Label::Hallucinated, Label::Good] {
        let found: Vec<(u64, Label)> = per_variant[0]
            .iter()
            .filter(|(_, l)| *l == want)
            .take(spec.probe_chains)
            .copied()
            .collect();
        if found.is_empty() {
            warn!("no vanilla sample labelled {want}; no Laplacian record for it");
        }
        picks.extend(found);
    }
    metrics.push("laplacian_probes_hallucinated", picks.iter().filter(|p| p.1 == Label::Hallucinated).count() as f64);
    metrics.push("laplacian_probes_good", picks.iter().filter(|p| p.1 == Label::Good).count() as f64);
    let record = RecordOptions {
        snapshot_stride: None,
        laplacian: Some(probe),
    };
    let mut curve_rows = Vec::new();
    let mut freq_rows = Vec::new();
    let mut curves: Vec<Vec<(f64, f64)>> = Vec::new();
    for &(chain, label) in &picks {
        let rerun = sample_batch(
            &Vanilla(&net),
            &sched,
            1,
            cfg.seed,
            &record,
            BatchOptions {
                block_size: 1,
                first_chain: chain,
            },
        )?;
        let tr = &rerun.trajectories[0];
        let stats: &LaplacianStats = tr.laplacian.as_ref().expect("recording was requested");
        let curve = stats.mean_curve();
        if let Some((t, v)) = stats.peak() {
            metrics.push(format!("laplacian_peak_t_chain{chain}"), t as f64);
            metrics.push(format!("laplacian_peak_value_chain{chain}"), v);
        }
        curves.push(curve.iter().map(|&(t, v)| (t as f64, v)).collect());
        curve_rows.extend(curve.iter().map(|&(t, mean_top_k)| CurveRow {
            chain,
            label,
            t,
            mean_top_k,
        }));
        let freq: Vec<f64> = stats.frequency().iter().map(|&c| c as f64).collect();
        for (i, &count) in stats.frequency().iter().enumerate() {
            freq_rows.push(FrequencyRow {
                chain,
                label,
                row: i / w,
                col: i % w,
                count,
                window_steps: stats.window_steps(),
            });
        }
        let tag = format!("{label:?}").to_lowercase();
        plot::heatmap(&dir.join(format!("laplacian_frequency_{tag}_chain{chain}.png")), &freq, h, w, 8)?;
        plot::image_grid(&dir.join(format!("laplacian_sample_{tag}_chain{chain}.png")), &[&to_image(&tr.sample, h, w).pixels], h, w, 1, 8)?;
    }
    write_csv(&dir.join("laplacian_curve.csv"), &curve_rows)?;
    write_csv(&dir.join("laplacian_frequency.csv"), &freq_rows)?;
    if !curves.is_empty() {
        let refs: Vec<&[(f64, f64)]> = curves.iter().map(|c| c.as_slice()).collect();
        plot::line_plot(&dir.join("laplacian_curve.png"), &refs)?;
    }
    Ok(())
}

/// One row of the Hutchinson convergence study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n_samples: usize,
    pub median_relative_error: f64,
}

/// Random dense symmetric positive semidefinite `d x d` matrices `A A^T`,
/// with standard normal entries in `A`.
pub fn random_hessians(count: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum();
                }
            }
            m
        })
        .collect()
}

/// Median over `matrices` of the relative error of the Hutchinson trace
/// estimate of each Hessian, using the quadratic `f(x) = x^T H x / 2` at a
/// random point, for every sample count in `ns`.
pub fn hutchinson_convergence(matrices: &[Vec<f64>], ns: &[usize], delta: f64, seed: u64) -> Result<Vec<ConvergenceRow>> {
    let mut out = Vec::new();
    for &n in ns {
        let mut errs = Vec::with_capacity(matrices.len());
        for (k, m) in matrices.iter().enumerate() {
            let d = (m.len() as f64).sqrt() as usize;
            let trace: f64 = (0..d).map(|i| m[i * d + i]).sum();
            let f = |x: &[f64], _t: usize| -> Vec<f64> {
                let q: f64 = (0..d).map(|i| (0..d).map(|j| x[i] * m[i * d + j] * x[j]).sum::<f64>()).sum();
                vec![0.5 * q]
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let x: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
            let fx = f(&x, 0);
            let est = hutchinson_laplacian(f, &x, &fx, 0, delta, n, &mut rng)?[0];
            errs.push(((est - trace) / trace).abs());
        }
        errs.sort_by(f64::total_cmp);
        let mid = errs.len() / 2;
        let median = if errs.len() % 2 == 1 {
            errs[mid]
        } else {
            0.5 * (errs[mid - 1] + errs[mid])
        };
        out.push(ConvergenceRow {
            n_samples: n,
            median_relative_error: median,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct CostRow {
    estimator: EstimatorMode,
    dim: usize,
    extra_evals_per_step: usize,
    microseconds_per_call: f64,
}

fn run_estimator_bench(cfg: &ExperimentConfig, dir: &Path, metrics: &mut Metrics, stage: &mut &'static str) -> Result<()> {
    *stage = "convergence";
    let d = cfg.model.dim();
    let matrices = random_hessians(cfg.samples, d, cfg.seed);
    let ns = [1, 3, 10, 30, 100, 300, 1000];
    let rows = hutchinson_convergence(&matrices, &ns, cfg.sharpening.delta, cfg.seed)?;
    for r in &rows {
        metrics.push(format!("median_relative_error_n{}", r.n_samples), r.median_relative_error);
    }
    write_csv(&dir.join("hutchinson_convergence.csv"), &rows)?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.n_samples as f64).log10(), r.median_relative_error.log10())).collect();
    plot::line_plot(&dir.join("hutchinson_convergence.png"), &[&pts])?;

    *stage = "cost";
    let mut cost = Vec::new();
    for (mode, dim) in [(EstimatorMode::Fd1d, 1), (EstimatorMode::Stencil2d, 2), (EstimatorMode::Hutchinson, d)] {
        let net = DenoiserNet::new(crate::denoiser::ArchSpec::mlp(dim), cfg.seed)?;
        let rows = 256;
        let xs: Vec<f64> = (0..rows * dim).map(|i| (i as f64 * 0.1).sin()).collect();
        let base = net.predict_batch(&xs, 10);
        let mut probes: Vec<ChaCha8Rng> = (0..rows).map(|i| ChaCha8Rng::seed_from_u64(i as u64)).collect();
        let reps = 20;
        let started = Instant::now();
        for _ in 0..reps {
            estimate_laplacian(&net, &xs, &base, 10, mode, cfg.sharpening.delta, cfg.sharpening.hutchinson_samples, &mut probes);
        }
        let us = started.elapsed().as_secs_f64() * 1e6 / (reps * rows) as f64;
        cost.push(CostRow {
            estimator: mode,
            dim,
            extra_evals_per_step: mode.extra_evals(cfg.sharpening.hutchinson_samples),
            microseconds_per_call: us,
        });
    }
    write_csv(&dir.join("estimator_cost.csv"), &cost)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(ExperimentKind::Toy1d);
        cfg.output_dir = dir.to_path_buf();
        cfg.denoiser = DenoiserSource::Oracle;
        cfg.training.epochs = 0;
        cfg.samples = 64;
        cfg.schedule.steps = 100;
        cfg.metrics.laplacian_window = (20, 40);
        cfg
    }

    #[test]
    fn oracle_smoke_run_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config(dir.path());
        let out = run(&cfg).unwrap();
        for f in ["config.toml", "metrics.csv", "samples.csv", "im_counts.csv", "l1.csv", "histogram.csv", "histogram.png"] {
            assert!(out.dir.join(f).exists(), "{f}");
        }
        let first = fs::read(out.dir.join("samples.csv")).unwrap();
        let metrics_first = fs::read(out.dir.join("metrics.csv")).unwrap();
        let again = run(&cfg).unwrap();
        assert_eq!(again.dir, out.dir);
        assert_eq!(fs::read(again.dir.join("samples.csv")).unwrap(), first);
        assert_eq!(fs::read(again.dir.join("metrics.csv")).unwrap(), metrics_first);
        let l1 = out.metrics.get("l1_vanilla").unwrap();
        assert!((0.0..=2.0).contains(&l1));
    }

    #[test]
    fn failure_leaves_error_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke_config(dir.path());
        cfg.kind = ExperimentKind::ScoreEvolution;
        cfg.denoiser = DenoiserSource::Network;
        cfg.evolution = ExperimentConfig::preset(ExperimentKind::ScoreEvolution).evolution;
        let err = run(&cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let manifest = fs::read_to_string(cfg.run_dir().join("error.json")).unwrap();
        assert!(manifest.contains("checkpoint"));
    }

    #[test]
    fn oracle_score_evolution_has_no_vanilla_error() {
        let cfg = ExperimentConfig::preset(ExperimentKind::ScoreEvolution);
        let gm = cfg.mixture.as_ref().unwrap().build().unwrap();
        let sched = cfg.schedule.build().unwrap();
        let (rows, summary) = score_evolution(&OracleModel::new(&gm, &sched), &gm, &sched, 0.0, 0.1, cfg.evolution.as_ref().unwrap()).unwrap();
        assert_eq!(summary.len(), 4);
        for s in &summary {
            assert!(s.vanilla_deviation < 1e-6 * (1.0 + s.vanilla_deviation));
            assert_eq!(s.sharpening_change, 0.0);
        }
        assert!(rows.iter().all(|r| r.sharpened_score == r.vanilla_score));
    }

    #[test]
    fn convergence_improves_with_samples() {
        let m = random_hessians(20, 8, 3);
        let rows = hutchinson_convergence(&m, &[10, 1000], 0.05, 1).unwrap();
        assert!(rows[1].median_relative_error < rows[0].median_relative_error);
    }
}
