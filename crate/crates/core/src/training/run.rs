//! Progressive vision-aided training runs with snapshots, event logging,
//! model additions and resume.
//!
//! At every step boundary the runner (1) snapshots the networks and records
//! the training-set FID on the configured cadence, (2) adds the next model
//! when the schedule says so, restoring the best snapshot first, and (3)
//! takes one training step.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{self, step_dir_name};
use super::{latent, smoothing_gate, train_step, EnsembleState, SnapshotRecord, StepSettings, VisionDisc};
use crate::autograd::Tensor;
use crate::backbone::Generator;
use crate::config::{ExperimentConfig, Strategy, ECHO_FILE};
use crate::data::Dataset;
use crate::error::{Error, IoContext, Result};
use crate::heads::HeadParams;
use crate::metrics::{fit_gaussian, GaussianStats, MetricReport};
use crate::model_bank::{surrogates, BankEntry, ModelBank, MODEL_DIR_ENV};
use crate::nn::Adam;
use crate::rng;
use crate::selection::rank_models;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LOCK_FILE: &str = ".lock";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: u64,
    pub kind: String,
    pub payload: serde_json::Value,
}

/// Append-only JSON-lines log that tracks its own length for truncation on
/// resume.
pub struct JsonLines {
    file: File,
    len: u64,
    path: PathBuf,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).at(path)?;
        Ok(Self { file, len: 0, path: path.to_path_buf() })
    }

    /// Open an existing log cut back to `len` bytes.
    pub fn truncate_to(path: &Path, len: u64) -> Result<Self> {
        let file = OpenOptions::new().write(true).open(path).at(path)?;
        file.set_len(len).at(path)?;
        let mut log = Self { file, len, path: path.to_path_buf() };
        use std::io::Seek;
        log.file.seek(std::io::SeekFrom::Start(len)).at(path)?;
        Ok(log)
    }

    pub fn append<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_string(value).map_err(|e| Error::Data(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).at(&self.path)?;
        self.file.flush().at(&self.path)?;
        self.len += line.len() as u64;
        Ok(())
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).at(path)?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.at(path)?;
            serde_json::from_str(&l).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir).at(run_dir)?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config {
                key: "run.out_dir".into(),
                reason: format!(
                    "{} is locked by another invocation (remove {} if stale)",
                    run_dir.display(),
                    path.display()
                ),
            }),
            Err(e) => Err(Error::Io { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// The configured bank: a manifest when given, else the built-in desk bank.
pub fn load_bank(cfg: &ExperimentConfig) -> Result<ModelBank> {
    let bank = match &cfg.bank.manifest {
        Some(m) => {
            let dir = std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from);
            ModelBank::load(m, dir.as_deref())?
        }
        None => surrogates::desk_bank(cfg.bank.desk_seed)?,
    };
    bank.get(&cfg.bank.metric_model).map_err(|_| Error::Config {
        key: "bank.metric_model".into(),
        reason: format!("`{}` is not in the bank", cfg.bank.metric_model),
    })?;
    Ok(bank)
}

/// Selectable models: the bank minus the metric extractor and exclusions.
pub fn candidates(cfg: &ExperimentConfig, bank: &ModelBank) -> Vec<String> {
    bank.list_models()
        .into_iter()
        .filter(|m| *m != cfg.bank.metric_model && !cfg.bank.exclude.iter().any(|e| e == m))
        .map(String::from)
        .collect()
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut data = Dataset::load(&cfg.data.path)?;
    if let Some(n) = cfg.data.max_samples {
        if n < data.len() {
            data = Dataset::new(data.images.slice(ndarray::s![..n, .., .., ..]).to_owned())?;
        }
    }
    check_dataset(cfg, &data)?;
    Ok(data)
}

fn check_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    let (h, w) = (data.images.shape()[2], data.images.shape()[3]);
    if h != cfg.data.resolution || w != cfg.data.resolution {
        return Err(Error::Config {
            key: "data.resolution".into(),
            reason: format!("dataset images are {h}x{w}, config says {}", cfg.data.resolution),
        });
    }
    if data.channels() != cfg.data.channels {
        return Err(Error::Config {
            key: "data.channels".into(),
            reason: format!("dataset has {} channels, config says {}", data.channels(), cfg.data.channels),
        });
    }
    Ok(())
}

/// Generator samples for a latent batch, computed in chunks.
pub fn generate(g: &Generator, z: &Tensor) -> Tensor {
    let n = z.shape()[0];
    let parts: Vec<Tensor> = (0..n)
        .step_by(256)
        .map(|s| g.sample(&z.slice_axis(Axis(0), (s..(s + 256).min(n)).into()).to_owned()))
        .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap()
}

/// Metric-extractor features of `n` samples from fixed evaluation latents.
pub fn generated_features(g: &Generator, metric: &BankEntry, n: usize, seed: u64) -> Result<Array2<f64>> {
    let z = latent(seed, "eval-z", n, g.config.latent_dim);
    Ok(metric.features(&generate(g, &z))?.flattened())
}

/// Full metric report for a generator against precomputed real features.
pub fn evaluate(
    g: &Generator,
    metric: &BankEntry,
    real_feats: &Array2<f64>,
    real_stats: Option<&GaussianStats>,
    cfg: &ExperimentConfig,
    step: u64,
) -> Result<MetricReport> {
    let fake = generated_features(g, metric, cfg.metrics.n_gen, cfg.run.seed)?;
    crate::metrics::report_from_features(
        step,
        real_feats,
        &fake,
        real_stats,
        &cfg.metrics.kid,
        cfg.metrics.pr_k,
        cfg.run.seed,
    )
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    pub warm_start: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub state: EnsembleState,
    pub run_dir: PathBuf,
    pub best: SnapshotRecord,
    pub report: MetricReport,
    pub diverged: bool,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    bank: &'a ModelBank,
    data: &'a Dataset,
    settings: StepSettings,
    run_dir: PathBuf,
    events: JsonLines,
    metrics: JsonLines,
    metric: Arc<BankEntry>,
    real_feats: Array2<f64>,
    real_stats: GaussianStats,
}

impl Runner<'_> {
    fn emit(&mut self, step: u64, kind: &str, payload: serde_json::Value) -> Result<()> {
        self.events.append(&Event { step, kind: kind.into(), payload })
    }

    fn snapshot_fid(&self, g: &Generator) -> Result<f64> {
        let n = self.cfg.metrics.snapshot_samples.unwrap_or(self.cfg.metrics.n_gen);
        let fake = generated_features(g, &self.metric, n, self.cfg.run.seed)?;
        crate::metrics::fid(&self.real_stats, &fit_gaussian(&fake)?)
    }

    /// Save a snapshot; true when the divergence guard fires.
    fn snapshot(&mut self, state: &mut EnsembleState) -> Result<bool> {
        let step = state.step;
        let fid = self.snapshot_fid(&state.generator)?;
        let rel = PathBuf::from(CHECKPOINT_DIR).join(step_dir_name(step));
        let dir = self.run_dir.join(&rel);
        checkpoint::save_params(state, &dir, self.cfg)?;
        state.snapshots.push(SnapshotRecord { step, path: rel.clone(), fid });
        self.emit(step, "snapshot", json!({ "fid": fid, "path": rel }))?;
        let meta = checkpoint::capture(state, self.cfg.run.seed, fid, self.events.len(), self.metrics.len());
        checkpoint::write_state(&dir, &meta)?;
        if let Some(base) = state.baseline_fid {
            let limit = self.cfg.metrics.divergence_factor * base;
            if fid > limit {
                self.emit(step, "divergence", json!({ "fid": fid, "baseline_fid": base, "limit": limit }))?;
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn probe_samples(&self, state: &EnsembleState) -> Result<(Tensor, Tensor)> {
        let step = state.step;
        let seed = self.cfg.run.seed;
        let n = self.data.len().min(self.cfg.selection.max_samples);
        let real = if n < self.data.len() {
            let mut idx =
                index::sample(&mut rng::stream(seed, &format!("probe-real@{step}")), self.data.len(), n).into_vec();
            idx.sort_unstable();
            self.data.images.select(Axis(0), &idx).into_dyn()
        } else {
            self.data.images.clone().into_dyn()
        };
        let z = latent(seed, &format!("probe-z@{step}"), n, state.generator.config.latent_dim);
        Ok((generate(&state.generator, &z), real))
    }

    fn add_models(&mut self, state: &mut EnsembleState) -> Result<()> {
        let step = state.step;
        let best = state.best_snapshot().cloned().expect("a snapshot precedes every addition");
        checkpoint::restore_networks(state, &self.run_dir.join(&best.path))?;
        self.emit(step, "snapshot_restore", json!({ "from_step": best.step, "fid": best.fid }))?;
        if state.baseline_fid.is_none() {
            state.baseline_fid = Some(best.fid);
        }
        let (gen, real) = self.probe_samples(state)?;
        let mut exclude: std::collections::BTreeSet<String> = self.cfg.bank.exclude.iter().cloned().collect();
        exclude.insert(self.cfg.bank.metric_model.clone());
        let probe_cfg = self.cfg.selection.probe(self.cfg.run.seed.wrapping_add(step));
        let ranking = rank_models(self.bank, &gen, &real, &exclude, &probe_cfg)?;
        self.emit(step, "probe", json!({ "results": ranking }))?;
        let count = match self.cfg.selection.strategy {
            Strategy::Progressive => 1,
            Strategy::Fixed => self.cfg.selection.k_max,
        };
        for _ in 0..count {
            if state.selection.is_full() || state.selection.remaining.is_empty() {
                break;
            }
            let id = state.selection.select_next(step, ranking.clone())?;
            let chosen = ranking.iter().find(|r| r.model_id == id).unwrap().clone();
            let current: Vec<f64> = state
                .vision
                .iter()
                .filter_map(|v| ranking.iter().find(|r| r.model_id == v.model_id).map(|r| r.val_accuracy))
                .collect();
            if !current.is_empty() && current.iter().all(|&a| chosen.val_accuracy <= a) {
                self.emit(
                    step,
                    "warning",
                    json!({ "reason": "candidate probe accuracy not above any selected model", "model_id": id, "val_accuracy": chosen.val_accuracy, "selected_accuracies": current }),
                )?;
            }
            let spec = &self.bank.get(&id)?.spec;
            let head = HeadParams::build(spec, &self.cfg.bank.head_config(), self.cfg.run.seed)?;
            let smoothing =
                smoothing_gate(&chosen, self.cfg.selection.smoothing_epsilon, self.cfg.selection.smoothing_threshold);
            self.emit(
                step,
                "add_model",
                json!({
                    "model_id": id,
                    "k": state.vision.len() + 1,
                    "val_accuracy": chosen.val_accuracy,
                    "val_objective": chosen.val_objective,
                    "smoothing": smoothing,
                    "head_params": head.params.num_scalars(),
                }),
            )?;
            state.vision.push(VisionDisc {
                adam: Adam::new(self.cfg.optimizer.adam(), &head.params),
                aug: self.cfg.augmentation.heads.policy(&id),
                model_id: id,
                head,
                smoothing,
                added_at: step,
                probe_at_selection: chosen,
            });
        }
        Ok(())
    }

    fn final_report(&mut self, state: &EnsembleState, best: &SnapshotRecord) -> Result<MetricReport> {
        let mut g = state.generator.clone();
        let dir = self.run_dir.join(&best.path);
        let meta = checkpoint::read_state(&dir)?;
        let mut tmp = state.clone();
        checkpoint::restore_backbone(&mut tmp, &dir, &meta)?;
        g.params = tmp.generator.params;
        let mut report = evaluate(&g, &self.metric, &self.real_feats, Some(&self.real_stats), self.cfg, best.step)?;
        if !state.vision.is_empty() {
            let z = latent(
                self.cfg.run.seed,
                "final-probe-z",
                self.data.len().min(self.cfg.selection.max_samples),
                g.config.latent_dim,
            );
            let gen = generate(&g, &z);
            let n = gen.shape()[0];
            let real = self.data.images.slice(ndarray::s![..n, .., .., ..]).to_owned().into_dyn();
            let exclude = self
                .bank
                .list_models()
                .into_iter()
                .filter(|m| !state.vision.iter().any(|v| v.model_id == *m))
                .map(String::from)
                .collect();
            for r in rank_models(self.bank, &gen, &real, &exclude, &self.cfg.selection.probe(self.cfg.run.seed))? {
                report.probe_accuracies.insert(r.model_id, r.val_accuracy);
            }
        }
        self.metrics.append(&report)?;
        Ok(report)
    }
}

/// Write a small JSON diagnostic next to the logs after a numerical failure.
fn dump_diagnostic(run_dir: &Path, state: &EnsembleState, err: &Error) {
    let diag = json!({
        "step": state.step,
        "error": err.to_string(),
        "generator_finite": state.generator.params.all_finite(),
        "discriminator_finite": state.discriminator.params.all_finite(),
        "heads_finite": state.vision.iter().map(|v| (v.model_id.clone(), v.head.all_finite())).collect::<Vec<_>>(),
        "augmentation_p": state.vision.iter().map(|v| (v.model_id.clone(), v.aug.current_p)).collect::<Vec<_>>(),
    });
    let _ = std::fs::write(run_dir.join("diagnostic.json"), serde_json::to_string_pretty(&diag).unwrap_or_default());
}

/// Run the full schedule. A fresh run writes into `run.out_dir`; a resumed
/// run continues in the directory that owns the checkpoint, cutting the
/// logs back to the checkpoint so no event is duplicated.
pub fn run(cfg: &ExperimentConfig, bank: &ModelBank, data: &Dataset, opts: &RunOptions) -> Result<RunOutcome> {
    check_dataset(cfg, data)?;
    let cands = candidates(cfg, bank);
    if cfg.selection.k_max > cands.len() {
        return Err(Error::Config {
            key: "selection.k_max".into(),
            reason: format!("{} exceeds the {} selectable bank models", cfg.selection.k_max, cands.len()),
        });
    }
    let run_dir = match &opts.resume {
        Some(ckpt) => checkpoint::run_dir_of(ckpt)?,
        None => cfg.run.out_dir.clone(),
    };
    let _lock = RunLock::acquire(&run_dir)?;
    let metric = bank.get(&cfg.bank.metric_model)?.clone();
    let real_feats = metric.features(&data.head(cfg.metrics.reference_size))?.flattened();
    let real_stats = fit_gaussian(&real_feats)?;
    let events_path = run_dir.join(EVENTS_FILE);
    let metrics_path = run_dir.join(METRICS_FILE);

    let (mut state, events, metrics, resumed_at) = match &opts.resume {
        Some(ckpt) => {
            let (state, meta) = checkpoint::load_state(ckpt, cfg, bank)?;
            let events = JsonLines::truncate_to(&events_path, meta.event_log_len)?;
            let metrics = JsonLines::truncate_to(&metrics_path, meta.metrics_log_len)?;
            log::info!("resuming {} at step {}", run_dir.display(), meta.step);
            (state, events, metrics, Some(meta.step))
        }
        None => {
            std::fs::create_dir_all(run_dir.join(CHECKPOINT_DIR)).at(&run_dir)?;
            cfg.echo(&run_dir)?;
            let state = EnsembleState::new(cfg, cfg.schedule(data.len()), cands.clone())?;
            (state, JsonLines::create(&events_path)?, JsonLines::create(&metrics_path)?, None)
        }
    };
    let mut runner = Runner {
        cfg,
        bank,
        data,
        settings: StepSettings::from_config(cfg),
        run_dir: run_dir.clone(),
        events,
        metrics,
        metric,
        real_feats,
        real_stats,
    };
    if resumed_at.is_none() {
        runner.emit(
            0,
            "run_start",
            json!({
                "seed": cfg.run.seed,
                "n_train": data.len(),
                "schedule": state.schedule,
                "additions": state.schedule.addition_steps(),
                "candidates": cands,
                "generator_params": state.generator.params.num_scalars(),
                "discriminator_params": state.discriminator.params.num_scalars(),
            }),
        )?;
        if let Some(ws) = &opts.warm_start {
            let meta = checkpoint::read_state(ws)?;
            checkpoint::restore_backbone(&mut state, ws, &meta)?;
            runner.emit(0, "warm_start", json!({ "from": ws, "from_step": meta.step }))?;
        }
    }

    let additions = state.schedule.addition_steps();
    let total = state.schedule.total_steps;
    let mut skip_snapshot = resumed_at;
    let mut diverged = false;
    loop {
        let step = state.step;
        if skip_snapshot != Some(step)
            && (step % cfg.metrics.every == 0 || step >= total)
            && runner.snapshot(&mut state)?
        {
            diverged = true;
            break;
        }
        skip_snapshot = None;
        if step >= total {
            break;
        }
        let k = state.vision.len();
        if k < additions.len()
            && additions[k] == step
            && !state.selection.is_full()
            && !state.selection.remaining.is_empty()
        {
            runner.add_models(&mut state)?;
        }
        match train_step(&mut state, bank, data, &runner.settings) {
            Ok(report) => {
                if report.step % cfg.run.log_every == 0 {
                    runner.emit(report.step, "step", serde_json::to_value(&report).unwrap())?;
                }
            }
            Err(e) => {
                dump_diagnostic(&run_dir, &state, &e);
                runner.emit(state.step, "abort", json!({ "error": e.to_string() }))?;
                return Err(e);
            }
        }
    }
    let best = state.best_snapshot().cloned().expect("at least one snapshot");
    let report = runner.final_report(&state, &best)?;
    runner.emit(
        state.step,
        "run_end",
        json!({
            "best_step": best.step,
            "best_fid": best.fid,
            "diverged": diverged,
            "fid": report.fid,
            "kid_x1000": report.kid_x1000,
            "precision": report.precision,
            "recall": report.recall,
        }),
    )?;
    Ok(RunOutcome { state, run_dir, best, report, diverged })
}

/// The config saved with a checkpoint and the generator it holds.
pub fn load_generator(ckpt: &Path) -> Result<(ExperimentConfig, Generator, u64)> {
    let cfg = crate::config::parse_config(&ckpt.join(ECHO_FILE))?;
    let meta = checkpoint::read_state(ckpt)?;
    let mut state = EnsembleState::new(&cfg, meta.schedule.clone(), std::iter::empty())?;
    checkpoint::restore_backbone(&mut state, ckpt, &meta)?;
    Ok((cfg, state.generator, meta.step))
}

/// Metrics for the generator stored in a checkpoint, using the config saved
/// alongside it. `data` overrides the reference dataset.
pub fn evaluate_checkpoint(ckpt: &Path, data: Option<&Path>) -> Result<MetricReport> {
    let (cfg, generator, step) = load_generator(ckpt)?;
    let bank = load_bank(&cfg)?;
    let dataset = match data {
        Some(p) => Dataset::load(p)?,
        None => load_dataset(&cfg)?,
    };
    let metric = bank.get(&cfg.bank.metric_model)?;
    let real = metric.features(&dataset.head(cfg.metrics.reference_size))?.flattened();
    evaluate(&generator, metric, &real, None, &cfg, step)
}

/// Probe every selectable bank model on samples from the generator in
/// `ckpt`, or from a freshly initialized generator when no checkpoint is
/// given. Results are in selection order.
pub fn rank_for_config(
    cfg: &ExperimentConfig,
    bank: &ModelBank,
    data: &Dataset,
    ckpt: Option<&Path>,
) -> Result<Vec<crate::selection::ProbeResult>> {
    check_dataset(cfg, data)?;
    let mut state = EnsembleState::new(cfg, cfg.schedule(data.len()), std::iter::empty())?;
    if let Some(dir) = ckpt {
        let meta = checkpoint::read_state(dir)?;
        checkpoint::restore_backbone(&mut state, dir, &meta)?;
    }
    let n = data.len().min(cfg.selection.max_samples);
    let z = latent(cfg.run.seed, "rank-z", n, state.generator.config.latent_dim);
    let fake = generate(&state.generator, &z);
    let real = data.images.slice(ndarray::s![..n, .., .., ..]).to_owned().into_dyn();
    let mut exclude: std::collections::BTreeSet<String> = cfg.bank.exclude.iter().cloned().collect();
    exclude.insert(cfg.bank.metric_model.clone());
    rank_models(bank, &fake, &real, &exclude, &cfg.selection.probe(cfg.run.seed))
}
