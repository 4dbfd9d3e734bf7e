//! Snapshot directories: parameter blocks for every network and optimizer
//! plus a JSON manifest of the remaining ensemble state.
//!
//! Layout of `<run>/checkpoints/step_NNNNNNNN/`:
//! `generator.vapb`, `discriminator.vapb`, `head_<model>.vapb`, the matching
//! `*.adam_m` / `*.adam_v` moment blocks, `state.json` and `config.toml`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EnsembleState, SnapshotRecord, VisionDisc};
use crate::augmentation::AugPolicy;
use crate::config::{ExperimentConfig, Schedule};
use crate::error::{Error, IoContext, Result};
use crate::heads::HeadParams;
use crate::model_bank::ModelBank;
use crate::nn::{Adam, ParamStore};
use crate::selection::{ProbeResult, SelectionState};

pub const STATE_FILE: &str = "state.json";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionMeta {
    pub model_id: String,
    pub aug: AugPolicy,
    pub smoothing: f64,
    pub added_at: u64,
    pub probe_at_selection: ProbeResult,
    pub adam_step: u64,
}

/// Everything in a snapshot that is not a parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub format: u32,
    pub step: u64,
    /// Master seed; every stream is derived from it and a `name@step` label,
    /// so no stream positions need saving.
    pub seed: u64,
    pub schedule: Schedule,
    pub selection: SelectionState,
    pub d_aug: AugPolicy,
    pub g_adam_step: u64,
    pub d_adam_step: u64,
    pub vision: Vec<VisionMeta>,
    pub sign_buffers: BTreeMap<String, Vec<f64>>,
    pub snapshots: Vec<SnapshotRecord>,
    pub baseline_fid: Option<f64>,
    pub fid: f64,
    /// Event-log length in bytes right after this snapshot's event.
    pub event_log_len: u64,
    pub metrics_log_len: u64,
}

pub fn step_dir_name(step: u64) -> String {
    format!("step_{step:08}")
}

fn head_prefix(model_id: &str) -> String {
    let safe: String =
        model_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("head_{safe}")
}

/// Write parameter blocks and the config copy. `state.json` is written
/// separately by [`write_state`] once the log offsets are known.
pub fn save_params(state: &EnsembleState, dir: &Path, config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    state.generator.params.save(&dir.join("generator.vapb"))?;
    state.g_adam.save(dir, "generator")?;
    state.discriminator.params.save(&dir.join("discriminator.vapb"))?;
    state.d_adam.save(dir, "discriminator")?;
    for v in &state.vision {
        let prefix = head_prefix(&v.model_id);
        v.head.params.save(&dir.join(format!("{prefix}.vapb")))?;
        v.adam.save(dir, &prefix)?;
    }
    config.echo(dir)?;
    Ok(())
}

pub fn capture(
    state: &EnsembleState,
    seed: u64,
    fid: f64,
    event_log_len: u64,
    metrics_log_len: u64,
) -> CheckpointState {
    CheckpointState {
        format: FORMAT,
        step: state.step,
        seed,
        schedule: state.schedule.clone(),
        selection: state.selection.clone(),
        d_aug: state.d_aug.clone(),
        g_adam_step: state.g_adam.step,
        d_adam_step: state.d_adam.step,
        vision: state
            .vision
            .iter()
            .map(|v| VisionMeta {
                model_id: v.model_id.clone(),
                aug: v.aug.clone(),
                smoothing: v.smoothing,
                added_at: v.added_at,
                probe_at_selection: v.probe_at_selection.clone(),
                adam_step: v.adam.step,
            })
            .collect(),
        sign_buffers: state.sign_buffers.clone(),
        snapshots: state.snapshots.clone(),
        baseline_fid: state.baseline_fid,
        fid,
        event_log_len,
        metrics_log_len,
    }
}

pub fn write_state(dir: &Path, meta: &CheckpointState) -> Result<()> {
    let path = dir.join(STATE_FILE);
    let text = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Checkpoint { path: path.clone(), reason: e.to_string() })?;
    std::fs::write(&path, text).at(&path)
}

pub fn read_state(dir: &Path) -> Result<CheckpointState> {
    let path = dir.join(STATE_FILE);
    let text = std::fs::read_to_string(&path).at(&path)?;
    let meta: CheckpointState =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint { path: path.clone(), reason: e.to_string() })?;
    if meta.format != FORMAT {
        return Err(Error::Checkpoint { path, reason: format!("unsupported format {}", meta.format) });
    }
    Ok(meta)
}

fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let loaded = ParamStore::load(path)?;
    store.assign(&loaded).map_err(|_| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: "parameter layout differs from the config".into(),
    })
}

/// Load the generator and discriminator (and their optimizers) from `dir`
/// into `state`.
pub fn restore_backbone(state: &mut EnsembleState, dir: &Path, meta: &CheckpointState) -> Result<()> {
    load_into(&mut state.generator.params, &dir.join("generator.vapb"))?;
    load_into(&mut state.discriminator.params, &dir.join("discriminator.vapb"))?;
    let adam = state.g_adam.config;
    state.g_adam = Adam::load(adam, meta.g_adam_step, dir, "generator")?;
    state.d_adam = Adam::load(adam, meta.d_adam_step, dir, "discriminator")?;
    Ok(())
}

/// Restore every network in `dir`. Heads that were added after the snapshot
/// keep their current parameters; augmentation strengths are not touched.
pub fn restore_networks(state: &mut EnsembleState, dir: &Path) -> Result<CheckpointState> {
    let meta = read_state(dir)?;
    restore_backbone(state, dir, &meta)?;
    for v in state.vision.iter_mut() {
        if let Some(m) = meta.vision.iter().find(|m| m.model_id == v.model_id) {
            let prefix = head_prefix(&v.model_id);
            load_into(&mut v.head.params, &dir.join(format!("{prefix}.vapb")))?;
            v.adam = Adam::load(v.adam.config, m.adam_step, dir, &prefix)?;
        }
    }
    Ok(meta)
}

/// Rebuild a full ensemble state from `dir` for resuming.
pub fn load_state(dir: &Path, config: &ExperimentConfig, bank: &ModelBank) -> Result<(EnsembleState, CheckpointState)> {
    let meta = read_state(dir)?;
    let mut state = EnsembleState::new(config, meta.schedule.clone(), std::iter::empty())?;
    restore_backbone(&mut state, dir, &meta)?;
    for m in &meta.vision {
        let spec = &bank.get(&m.model_id)?.spec;
        let mut head = HeadParams::build(spec, &config.bank.head_config(), config.run.seed)?;
        let prefix = head_prefix(&m.model_id);
        load_into(&mut head.params, &dir.join(format!("{prefix}.vapb")))?;
        let adam = Adam::load(config.optimizer.adam(), m.adam_step, dir, &prefix)?;
        state.vision.push(VisionDisc {
            model_id: m.model_id.clone(),
            head,
            adam,
            aug: m.aug.clone(),
            smoothing: m.smoothing,
            added_at: m.added_at,
            probe_at_selection: m.probe_at_selection.clone(),
        });
    }
    state.selection = meta.selection.clone();
    state.d_aug = meta.d_aug.clone();
    state.step = meta.step;
    state.sign_buffers = meta.sign_buffers.clone();
    state.snapshots = meta.snapshots.clone();
    state.baseline_fid = meta.baseline_fid;
    Ok((state, meta))
}

/// Run directory that owns a checkpoint directory.
pub fn run_dir_of(checkpoint: &Path) -> Result<PathBuf> {
    checkpoint.parent().and_then(Path::parent).map(Path::to_path_buf).ok_or_else(|| Error::Checkpoint {
        path: checkpoint.to_path_buf(),
        reason: "not inside <run>/checkpoints/".into(),
    })
}
