//! Experiment configuration files.
//!
//! A config file is TOML. Only `kind` is required: every other section falls
//! back to the preset for that kind, and keys given in the file override the
//! preset key by key (tables merge recursively). The fully resolved config is
//! what runs, what gets written to the run directory and what gets hashed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{ArchSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::gmm::MixtureSpec;
use crate::schedule::ScheduleConfig;
use crate::shapes::{ClassifierConfig, GeneratorConfig};
use crate::sharpening::{EstimatorMode, Gate, SharpeningConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Toy1d,
    Toy2d,
    Shapes,
    EstimatorBench,
    ScoreEvolution,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Toy1d => "toy1d",
            ExperimentKind::Toy2d => "toy2d",
            ExperimentKind::Shapes => "shapes",
            ExperimentKind::EstimatorBench => "estimator-bench",
            ExperimentKind::ScoreEvolution => "score-evolution",
        }
    }
}

/// Where the noise predictor comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserSource {
    /// Train a network (or load `checkpoint` when it is set).
    Network,
    /// Exact noise prediction from the mixture; toy experiments only.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Number of training points drawn from the mixture (toy experiments) or
    /// generated images (shapes).
    pub data_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    /// Distance beyond which a sample counts as inter-mode. Defaults to four
    /// times the smallest component standard deviation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub im_threshold: Option<f64>,
    pub top_k: usize,
    /// Inclusive forward-timestep window for the Laplacian frequency maps.
    pub laplacian_window: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesSpec {
    pub generator: GeneratorConfig,
    pub classifier: ClassifierConfig,
    /// How many sampled chains of each label to re-run with Laplacian recording.
    pub probe_chains: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionSpec {
    pub timesteps: Vec<usize>,
    pub grid_points: usize,
    pub grid_range: (f64, f64),
    /// Intervals (open) over which mean deviations are summarized.
    pub inter_mode: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Number of chains sampled for each of the vanilla and sharpened runs.
    pub samples: usize,
    /// Parent of the run directory. Not part of the config hash.
    pub output_dir: PathBuf,
    pub denoiser: DenoiserSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureSpec>,
    pub schedule: ScheduleConfig,
    pub model: ArchSpec,
    pub training: TrainingSpec,
    pub sharpening: SharpeningConfig,
    pub metrics: MetricsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shapes: Option<ShapesSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evolution: Option<EvolutionSpec>,
}

impl TrainingSpec {
    pub fn optimizer(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }
}

fn toy_metrics() -> MetricsSpec {
    MetricsSpec {
        im_threshold: None,
        top_k: 100,
        laplacian_window: (200, 400),
    }
}

fn train(epochs: usize, batch_size: usize, lr: f64, data_size: usize) -> TrainingSpec {
    TrainingSpec {
        epochs,
        batch_size,
        lr,
        seed: 0,
        data_size,
    }
}

impl ExperimentConfig {
    /// Defaults for each experiment kind.
    pub fn preset(kind: ExperimentKind) -> Self {
        let toy1d = Self {
            kind,
            seed: 0,
            samples: 10_000,
            output_dir: PathBuf::from("runs"),
            denoiser: DenoiserSource::Network,
            checkpoint: None,
            mixture: Some(MixtureSpec::toy1d()),
            schedule: ScheduleConfig::linear(1000),
            model: ArchSpec::mlp(1),
            training: train(1000, 256, 1e-3, 10_000),
            sharpening: SharpeningConfig {
                alpha: 0.01,
                delta: 0.1,
                gate: Gate::Threshold { t_threshold: 50 },
                hutchinson_samples: 3,
                estimator: EstimatorMode::Fd1d,
                seed: 0,
            },
            metrics: toy_metrics(),
            shapes: None,
            evolution: None,
        };
        match kind {
            ExperimentKind::Toy1d => toy1d,
            ExperimentKind::ScoreEvolution => Self {
                evolution: Some(EvolutionSpec {
                    timesteps: vec![0, 5, 10, 50],
                    grid_points: 401,
                    grid_range: (0.5, 3.5),
                    inter_mode: vec![(1.2, 1.8), (2.2, 2.8)],
                }),
                ..toy1d
            },
            ExperimentKind::Toy2d => Self {
                mixture: Some(MixtureSpec::toy2d()),
                model: ArchSpec::mlp(2),
                training: train(1000, 256, 1e-3, 10_000),
                sharpening: SharpeningConfig {
                    alpha: 0.0025,
                    delta: 0.05,
                    estimator: EstimatorMode::Stencil2d,
                    ..toy1d.sharpening
                },
                ..toy1d
            },
            ExperimentKind::EstimatorBench => Self {
                samples: 20,
                model: ArchSpec::mlp(8),
                mixture: None,
                sharpening: SharpeningConfig {
                    estimator: EstimatorMode::Hutchinson,
                    ..toy1d.sharpening
                },
                ..toy1d
            },
            ExperimentKind::Shapes => Self {
                samples: 1000,
                mixture: None,
                schedule: ScheduleConfig {
                    clip_denoised: Some(1.0),
                    ..ScheduleConfig::cosine(1000)
                },
                model: ArchSpec::Conv {
                    height: 32,
                    width: 32,
                    channels: [32, 64],
                    time_embed_dim: 32,
                },
                training: train(50, 64, 2e-4, 5000),
                sharpening: SharpeningConfig {
                    alpha: 0.05,
                    delta: 0.05,
                    gate: Gate::Range { t_low: 200, t_high: 400 },
                    hutchinson_samples: 3,
                    estimator: EstimatorMode::Hutchinson,
                    seed: 0,
                },
                shapes: Some(ShapesSpec {
                    generator: GeneratorConfig::default(),
                    classifier: ClassifierConfig::default(),
                    probe_chains: 1,
                }),
                ..toy1d
            },
        }
    }

    /// Parses a config file, filling unspecified keys from the preset.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let kind: ExperimentKind = user
            .get("kind")
            .ok_or_else(|| Error::config("config needs a `kind` key"))?
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let mut merged = toml::Value::try_from(Self::preset(kind)).map_err(|e| Error::config(e.to_string()))?;
        // A gate given in the file replaces the preset's gate instead of merging with it.
        const GATE_KEYS: [&str; 3] = ["t_threshold", "t_low", "t_high"];
        let user_gate = user
            .get("sharpening")
            .and_then(|s| s.as_table())
            .is_some_and(|t| GATE_KEYS.iter().any(|k| t.contains_key(*k)));
        if user_gate {
            if let Some(t) = merged.get_mut("sharpening").and_then(|s| s.as_table_mut()) {
                GATE_KEYS.iter().for_each(|k| {
                    t.remove(*k);
                });
            }
        }
        merge(&mut merged, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.sharpening.validate(self.schedule.steps)?;
        self.training.optimizer().validate()?;
        if self.samples == 0 {
            return Err(Error::config("samples must be at least 1"));
        }
        let toy = matches!(self.kind, ExperimentKind::Toy1d | ExperimentKind::Toy2d | ExperimentKind::ScoreEvolution);
        if toy {
            let gm = self
                .mixture
                .as_ref()
                .ok_or_else(|| Error::config("toy experiments need a [mixture] section"))?
                .build()?;
            if gm.dim() != self.model.dim() {
                return Err(Error::config(format!(
                    "mixture dimension {} does not match model dimension {}",
                    gm.dim(),
                    self.model.dim()
                )));
            }
            self.sharpening.check_dim(gm.dim())?;
        }
        if self.kind == ExperimentKind::Shapes {
            let s = self
                .shapes
                .as_ref()
                .ok_or_else(|| Error::config("shapes experiments need a [shapes] section"))?;
            s.generator.validate()?;
            if self.model.dim() != s.generator.height * s.generator.width {
                return Err(Error::config("model size does not match the shapes canvas"));
            }
            if self.denoiser == DenoiserSource::Oracle {
                return Err(Error::config("the oracle denoiser exists only for mixtures"));
            }
        }
        if self.kind == ExperimentKind::ScoreEvolution {
            let e = self
                .evolution
                .as_ref()
                .ok_or_else(|| Error::config("score-evolution needs an [evolution] section"))?;
            if e.grid_points < 2 || e.timesteps.iter().any(|&t| t >= self.schedule.steps) {
                return Err(Error::config("evolution needs >= 2 grid points and timesteps inside the schedule"));
            }
            if self.model.dim() != 1 {
                return Err(Error::config("score-evolution is defined for 1D models"));
            }
        }
        let (lo, hi) = self.metrics.laplacian_window;
        if lo > hi || hi >= self.schedule.steps {
            return Err(Error::config("laplacian_window must lie inside the schedule"));
        }
        if self.metrics.top_k == 0 {
            return Err(Error::config("top_k must be at least 1"));
        }
        Ok(())
    }

    /// IM threshold in effect (explicit, or four component standard deviations).
    pub fn im_threshold(&self) -> Result<f64> {
        match (self.metrics.im_threshold, &self.mixture) {
            (Some(t), _) => Ok(t),
            (None, Some(m)) => Ok(4.0 * m.min_sigma()?),
            (None, None) => Err(Error::config("im_threshold needs a mixture or an explicit value")),
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<output_dir>/<kind>-<first 12 hex digits of the hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir
            .join(format!("{}-{}", self.kind.name(), &self.hash()[..12]))
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
