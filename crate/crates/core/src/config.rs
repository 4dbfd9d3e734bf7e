//! Experiment configuration: one TOML file holds every hyperparameter.
//!
//! Unknown keys are rejected, missing keys take documented defaults, and
//! every value is range-checked before any work starts. Errors name the
//! offending key as a dotted path such as `selection.k_max`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::{AugMode, AugOp, AugPolicy};
use crate::backbone::{DiscriminatorConfig, GeneratorConfig};
use crate::error::{Error, IoContext, Result};
use crate::heads::HeadConfig;
use crate::metrics::KidConfig;
use crate::nn::AdamConfig;
use crate::selection::ProbeConfig;

/// File name of the echoed, fully defaulted config inside a run directory.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub bank: BankConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// PNG directory or `.vafd` file.
    pub path: PathBuf,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Use only the first `max_samples` images.
    #[serde(default)]
    pub max_samples: Option<usize>,
}

fn default_resolution() -> usize {
    32
}

fn default_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    /// Bank manifest; without one the built-in desk bank is used.
    pub manifest: Option<PathBuf>,
    /// Seed of the built-in desk bank weights.
    pub desk_seed: u64,
    /// Extractor used for FID/KID/precision-recall; never selected.
    pub metric_model: String,
    /// Further models kept out of selection.
    pub exclude: Vec<String>,
    pub head_width: Option<usize>,
    pub head_grid: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            desk_seed: 0,
            metric_model: crate::model_bank::surrogates::METRIC_MODEL.into(),
            exclude: vec![],
            head_width: None,
            head_grid: 3,
        }
    }
}

impl BankConfig {
    pub fn head_config(&self) -> HeadConfig {
        HeadConfig { width: self.head_width, grid: self.head_grid }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Add the best unused model at each schedule point.
    Progressive,
    /// Rank once when the first model is due and add the top `k_max` together.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub k_max: usize,
    pub split_ratio: f64,
    pub runs: usize,
    pub epochs: usize,
    pub l2: f64,
    /// Per-class cap on probe samples.
    pub max_samples: usize,
    pub smoothing_epsilon: f64,
    /// Smoothing turns on when the probe accuracy is strictly above this.
    pub smoothing_threshold: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            strategy: Strategy::Progressive,
            k_max: 3,
            split_ratio: p.split_ratio,
            runs: p.runs,
            epochs: p.epochs,
            l2: p.l2,
            max_samples: 10_000,
            smoothing_epsilon: 0.1,
            smoothing_threshold: 0.9,
        }
    }
}

impl SelectionConfig {
    pub fn probe(&self, seed: u64) -> ProbeConfig {
        ProbeConfig { split_ratio: self.split_ratio, runs: self.runs, epochs: self.epochs, l2: self.l2, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugSpec {
    pub mode: AugMode,
    #[serde(default)]
    pub target: f64,
    #[serde(default)]
    pub ops: Vec<AugOp>,
    #[serde(default = "default_adjust_step")]
    pub adjust_step: f64,
    #[serde(default)]
    pub initial_p: f64,
}

fn default_adjust_step() -> f64 {
    0.01
}

impl AugSpec {
    pub fn policy(&self, policy_id: &str) -> AugPolicy {
        let ops = if self.mode == AugMode::Fixed && self.ops.is_empty() {
            AugPolicy::fixed(policy_id).ops
        } else {
            self.ops.clone()
        };
        AugPolicy {
            policy_id: policy_id.into(),
            mode: self.mode,
            current_p: self.initial_p,
            target: self.target,
            ops,
            adjust_step: self.adjust_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Policy of the learned discriminator.
    pub original: AugSpec,
    /// Policy template for every vision-aided head.
    pub heads: AugSpec,
    /// Steps between controller updates; real-logit signs are pooled over them.
    pub adapt_interval: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            original: AugSpec {
                mode: AugMode::Adaptive,
                target: 0.6,
                ops: vec![AugOp::Hflip, AugOp::Translation, AugOp::Color],
                adjust_step: 0.01,
                initial_p: 0.0,
            },
            heads: AugSpec {
                mode: AugMode::Adaptive,
                target: 0.3,
                ops: vec![AugOp::Hflip, AugOp::Translation, AugOp::Color, AugOp::Cutout],
                adjust_step: 0.01,
                initial_p: 0.0,
            },
            adapt_interval: 4,
        }
    }
}

/// Interval lengths in images from the reference schedule: `(first, later)`
/// where `first` is the training span of the first selected model and
/// `later` the span of every further model.
pub fn reference_intervals_images(n_train: usize) -> (f64, f64) {
    if n_train < 1000 {
        (1e6, 1e6)
    } else if n_train < 2000 {
        (4e6, 2e6)
    } else {
        (8e6, 2e6)
    }
}

/// Warm-up length of the reference schedule, in images.
pub const REFERENCE_WARMUP_IMAGES: f64 = 0.5e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Steps of plain adversarial training before the first model is added.
    pub warmup_steps: Option<u64>,
    /// Steps each selected model trains before the next is added; one entry
    /// per model up to `selection.k_max`.
    pub intervals: Option<Vec<u64>>,
    /// Run length; defaults to warm-up plus all intervals.
    pub total_steps: Option<u64>,
    /// Factor applied to the reference schedule (given in images) when
    /// `warmup_steps` or `intervals` are unset.
    pub scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { warmup_steps: None, intervals: None, total_steps: None, scale: 0.004 }
    }
}

/// Resolved schedule in optimizer steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup: u64,
    pub intervals: Vec<u64>,
    pub total_steps: u64,
}

impl Schedule {
    /// Step at which the k-th model (0-based) joins: warm-up plus the
    /// intervals of the models before it.
    pub fn addition_step(&self, k: usize) -> Option<u64> {
        (k < self.intervals.len()).then(|| self.warmup + self.intervals[..k].iter().sum::<u64>())
    }

    pub fn addition_steps(&self) -> Vec<u64> {
        (0..self.intervals.len()).filter_map(|k| self.addition_step(k)).filter(|&s| s < self.total_steps).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, batch_size: 16 }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Snapshot cadence in steps.
    pub every: u64,
    /// Generated samples for the final report.
    pub n_gen: usize,
    /// Generated samples for snapshot FIDs; defaults to `n_gen`.
    pub snapshot_samples: Option<usize>,
    /// Real reference size; all training images when unset.
    pub reference_size: Option<usize>,
    pub kid: KidConfig,
    pub pr_k: usize,
    /// Stop when a snapshot FID exceeds this multiple of the baseline FID.
    pub divergence_factor: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            every: 500,
            n_gen: 5000,
            snapshot_samples: None,
            reference_size: None,
            kid: KidConfig::default(),
            pr_k: 3,
            divergence_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Steps between `step` events in the event log.
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, out_dir: PathBuf::from("runs/default"), log_every: 100 }
    }
}

fn range_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config { key: key.into(), reason: reason.into() }
}

fn check(ok: bool, key: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(range_err(key, reason))
    }
}

fn unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl ExperimentConfig {
    /// A config with every default and the given data path.
    pub fn with_data(path: impl Into<PathBuf>) -> Self {
        parse_config_str(&format!("[data]\npath = {:?}\n", path.into().display().to_string()), None)
            .expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        check(d.resolution >= 8 && d.resolution.is_power_of_two(), "data.resolution", "must be a power of two >= 8")?;
        check(d.channels == 1 || d.channels == 3, "data.channels", "must be 1 or 3")?;
        check(d.max_samples.is_none_or(|n| n >= 2), "data.max_samples", "must be at least 2")?;
        check(self.generator.latent_dim >= 1, "generator.latent_dim", "must be at least 1")?;
        check(self.generator.base_channels >= 1, "generator.base_channels", "must be at least 1")?;
        let disc = &self.discriminator;
        check(disc.base_channels >= 1, "discriminator.base_channels", "must be at least 1")?;
        check(disc.r1_gamma >= 0.0 && disc.r1_gamma.is_finite(), "discriminator.r1_gamma", "must be finite and >= 0")?;
        check(disc.r1_interval >= 1, "discriminator.r1_interval", "must be at least 1")?;
        let b = &self.bank;
        check(!b.metric_model.is_empty(), "bank.metric_model", "must name a bank model")?;
        check(b.head_width.is_none_or(|w| w >= 1), "bank.head_width", "must be at least 1")?;
        check(b.head_grid >= 1, "bank.head_grid", "must be at least 1")?;
        let s = &self.selection;
        check(s.split_ratio > 0.0 && s.split_ratio < 1.0, "selection.split_ratio", "must lie in (0, 1)")?;
        check(s.runs >= 1, "selection.runs", "must be at least 1")?;
        check(s.epochs >= 1, "selection.epochs", "must be at least 1")?;
        check(s.l2 >= 0.0, "selection.l2", "must be >= 0")?;
        check(s.max_samples >= 8, "selection.max_samples", "must be at least 8")?;
        check((0.0..1.0).contains(&s.smoothing_epsilon), "selection.smoothing_epsilon", "must lie in [0, 1)")?;
        check(unit(s.smoothing_threshold), "selection.smoothing_threshold", "must lie in [0, 1]")?;
        for (name, a) in [("original", &self.augmentation.original), ("heads", &self.augmentation.heads)] {
            check(unit(a.target), &format!("augmentation.{name}.target"), "must lie in [0, 1]")?;
            check(unit(a.adjust_step), &format!("augmentation.{name}.adjust_step"), "must lie in [0, 1]")?;
            check(unit(a.initial_p), &format!("augmentation.{name}.initial_p"), "must lie in [0, 1]")?;
        }
        check(self.augmentation.adapt_interval >= 1, "augmentation.adapt_interval", "must be at least 1")?;
        let sc = &self.schedule;
        check(sc.scale > 0.0 && sc.scale.is_finite(), "schedule.scale", "must be positive")?;
        if let Some(iv) = &sc.intervals {
            check(iv.len() >= s.k_max, "schedule.intervals", "needs one entry per model up to selection.k_max")?;
            check(iv.iter().all(|&t| t >= 1), "schedule.intervals", "entries must be at least 1")?;
        }
        let o = &self.optimizer;
        check(o.lr >= 0.0 && o.lr.is_finite(), "optimizer.lr", "must be finite and >= 0")?;
        check((0.0..1.0).contains(&o.beta1), "optimizer.beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&o.beta2), "optimizer.beta2", "must lie in [0, 1)")?;
        check(o.eps > 0.0, "optimizer.eps", "must be positive")?;
        check(o.batch_size >= 1, "optimizer.batch_size", "must be at least 1")?;
        let m = &self.metrics;
        check(m.every >= 1, "metrics.every", "must be at least 1")?;
        check(m.pr_k >= 1, "metrics.pr_k", "must be at least 1")?;
        check(m.n_gen > m.pr_k, "metrics.n_gen", "must exceed metrics.pr_k")?;
        check(m.snapshot_samples.is_none_or(|n| n >= 2), "metrics.snapshot_samples", "must be at least 2")?;
        check(m.reference_size.is_none_or(|n| n > m.pr_k), "metrics.reference_size", "must exceed metrics.pr_k")?;
        check(m.kid.subset_size >= 2, "metrics.kid.subset_size", "must be at least 2")?;
        check(m.kid.n_subsets >= 1, "metrics.kid.n_subsets", "must be at least 1")?;
        check(m.divergence_factor > 1.0, "metrics.divergence_factor", "must exceed 1")?;
        check(self.run.log_every >= 1, "run.log_every", "must be at least 1")?;
        Ok(())
    }

    /// Resolve the schedule for a dataset of `n_train` images. Unset parts
    /// come from the reference schedule multiplied by `schedule.scale`.
    pub fn schedule(&self, n_train: usize) -> Schedule {
        let sc = &self.schedule;
        let to_steps = |images: f64| ((images * sc.scale / self.optimizer.batch_size as f64).round() as u64).max(1);
        let warmup = sc.warmup_steps.unwrap_or_else(|| to_steps(REFERENCE_WARMUP_IMAGES));
        let intervals = match &sc.intervals {
            Some(iv) => iv[..self.selection.k_max].to_vec(),
            None => {
                let (first, later) = reference_intervals_images(n_train);
                (0..self.selection.k_max).map(|k| to_steps(if k == 0 { first } else { later })).collect()
            }
        };
        let total_steps = sc.total_steps.unwrap_or(warmup + intervals.iter().sum::<u64>());
        Schedule { warmup, intervals, total_steps }
    }

    /// Write the fully defaulted config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(ECHO_FILE);
        let text = toml::to_string_pretty(self).map_err(|e| range_err("<config>", e.to_string()))?;
        std::fs::write(&path, text).at(&path)?;
        Ok(path)
    }
}

/// Parse TOML text. Relative paths are resolved against `base_dir` when given.
pub fn parse_config_str(text: &str, base_dir: Option<&Path>) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| range_err("<toml>", e.message().to_string()))?;
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.message().to_string();
        // missing fields are reported at the parent path
        let key = match message.strip_prefix("missing field `").and_then(|m| m.strip_suffix('`')) {
            Some(field) if key == "." => field.to_string(),
            Some(field) => format!("{key}.{field}"),
            None => key,
        };
        range_err(&key, message)
    })?;
    if let Some(base) = base_dir {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.path);
        resolve(&mut cfg.run.out_dir);
        if let Some(m) = cfg.bank.manifest.as_mut() {
            resolve(m);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).at(path)?;
    parse_config_str(&text, Some(path.parent().unwrap_or(Path::new("."))))
}
