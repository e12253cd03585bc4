use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use sharpscore::config::{ExperimentConfig, ExperimentKind};
use sharpscore::runner;
use sharpscore::shapes::{self, classify, label_counts, ClassifierConfig, GeneratorConfig, Label};
use sharpscore::sharpening::{EstimatorMode, Gate};

#[derive(Parser)]
#[command(name = "sharpscore", version, about = "Score sharpening experiments for diffusion samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Plot vanilla, sharpened and true 1D scores at a few timesteps.
    ScoreEvolution {
        config: PathBuf,
        /// Trained 1D network; overrides `checkpoint` in the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Hutchinson convergence and estimator cost study.
    BenchEstimators {
        /// Optional config of kind `estimator-bench`; the preset is used otherwise.
        config: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Label every `.pgm` image in a directory.
    Classify {
        dir: PathBuf,
        /// Write per-image labels to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic shapes dataset (graymaps plus manifest.csv).
    GenerateShapes {
        dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include repeated shapes and hexagons.
        #[arg(long)]
        adversarial: bool,
    },
    /// Print the default config of an experiment kind.
    Preset {
        #[arg(value_parser = parse_kind)]
        kind: ExperimentKind,
    },
}

/// Command-line overrides of the sharpening section.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Sharpen while forward t < this value.
    #[arg(long, conflicts_with_all = ["t_low", "t_high"])]
    t_threshold: Option<usize>,
    /// Sharpen while t_low < forward t < t_high.
    #[arg(long, requires = "t_high")]
    t_low: Option<usize>,
    #[arg(long, requires = "t_low")]
    t_high: Option<usize>,
    #[arg(long)]
    hutchinson_samples: Option<usize>,
    #[arg(long, value_parser = parse_estimator)]
    estimator: Option<EstimatorMode>,
    /// Seed of the sharpening configuration.
    #[arg(long)]
    sharpen_seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| "expected toy1d, toy2d, shapes, estimator-bench or score-evolution".to_owned())
}

fn parse_estimator(s: &str) -> Result<EstimatorMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| "expected fd1d, stencil2d or hutchinson".to_owned())
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> anyhow::Result<()> {
        let s = &mut cfg.sharpening;
        if let Some(v) = self.alpha {
            s.alpha = v;
        }
        if let Some(v) = self.delta {
            s.delta = v;
        }
        if let Some(t) = self.t_threshold {
            s.gate = Gate::Threshold { t_threshold: t };
        }
        if let (Some(t_low), Some(t_high)) = (self.t_low, self.t_high) {
            s.gate = Gate::Range { t_low, t_high };
        }
        if let Some(v) = self.hutchinson_samples {
            s.hutchinson_samples = v;
        }
        if let Some(v) = self.estimator {
            s.estimator = v;
        }
        if let Some(v) = self.sharpen_seed {
            s.seed = v;
        }
        if let Some(v) = self.samples {
            cfg.samples = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        cfg.validate()?;
        Ok(())
    }
}

fn load(path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn report(outcome: &runner::RunOutcome) {
    println!("run directory: {}", outcome.dir.display());
    for row in outcome.metrics.rows() {
        println!("{:<36} {}", row.metric, row.value);
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let mut cfg = load(&config)?;
            overrides.apply(&mut cfg)?;
            println!("sharpening gate: {}", cfg.sharpening.gate.describe(cfg.schedule.steps));
            report(&runner::run(&cfg)?);
        }
        Command::ScoreEvolution {
            config,
            checkpoint,
            overrides,
        } => {
            let mut cfg = load(&config)?;
            if cfg.kind != ExperimentKind::ScoreEvolution {
                let preset = ExperimentConfig::preset(ExperimentKind::ScoreEvolution);
                cfg.kind = ExperimentKind::ScoreEvolution;
                cfg.evolution = cfg.evolution.or(preset.evolution);
            }
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            overrides.apply(&mut cfg)?;
            report(&runner::run(&cfg)?);
        }
        Command::BenchEstimators { config, output_dir } => {
            let mut cfg = match config {
                Some(p) => load(&p)?,
                None => ExperimentConfig::preset(ExperimentKind::EstimatorBench),
            };
            if cfg.kind != ExperimentKind::EstimatorBench {
                bail!("bench-estimators needs a config of kind estimator-bench");
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            report(&runner::run(&cfg)?);
        }
        Command::Classify { dir, out } => {
            let images = shapes::load_dataset(&dir).with_context(|| format!("reading {}", dir.display()))?;
            if images.is_empty() {
                bail!("no .pgm images in {}", dir.display());
            }
            let cfg = ClassifierConfig::default();
            let mut labels = Vec::with_capacity(images.len());
            let (mut annotated, mut correct) = (0, 0);
            let mut writer = out.as_ref().map(csv::Writer::from_path).transpose()?;
            if let Some(w) = writer.as_mut() {
                w.write_record(["file", "label", "vertices"])?;
            }
            for (name, img) in &images {
                let c = classify(img, &cfg);
                if !img.shapes.is_empty() {
                    annotated += 1;
                    correct += usize::from(c.label == img.expected_label());
                }
                if let Some(w) = writer.as_mut() {
                    let v: Vec<String> = c.components.iter().map(|c| c.vertices.to_string()).collect();
                    w.write_record([name.as_str(), &c.label.to_string(), &v.join(";")])?;
                }
                labels.push(c.label);
            }
            if let Some(mut w) = writer {
                w.flush()?;
            }
            let counts = label_counts(&labels);
            for (l, c) in Label::ALL.iter().zip(counts) {
                println!("{:<14} {:>6} {:>7.2}%", l.to_string(), c, 100.0 * c as f64 / labels.len() as f64);
            }
            if annotated > 0 {
                println!("accuracy on {annotated} annotated images: {:.2}%", 100.0 * correct as f64 / annotated as f64);
            }
        }
        Command::GenerateShapes {
            dir,
            count,
            seed,
            adversarial,
        } => {
            let g = GeneratorConfig::default();
            let images = if adversarial {
                shapes::generate_adversarial(count, &g, seed)?
            } else {
                shapes::generate_dataset(count, &g, seed)?
            };
            shapes::save_dataset(&dir, &images)?;
            println!("wrote {count} images to {}", dir.display());
        }
        Command::Preset { kind } => {
            print!("{}", ExperimentConfig::preset(kind).to_toml_string()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
