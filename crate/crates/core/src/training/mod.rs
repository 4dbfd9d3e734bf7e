//! Adversarial objectives, the ensemble state and a single training step.
//!
//! The learned discriminator `D` and every vision-aided head (a frozen
//! extractor plus a small trained classifier) each contribute one loss term;
//! the ensemble loss is their unweighted sum. Every random draw in a step
//! comes from a stream named after its purpose and the step index, so a step
//! depends only on the state it starts from.

pub mod checkpoint;
pub mod run;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment, AugMode, AugPolicy};
use crate::autograd::{Tape, Tensor, Var};
use crate::backbone::{Discriminator, Generator};
use crate::config::{ExperimentConfig, Schedule};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::model_bank::ModelBank;
use crate::nn::{Adam, Bound};
use crate::rng;
use crate::selection::{ProbeResult, SelectionState};

/// Id of the learned discriminator in reports and logs.
pub const ORIGINAL: &str = "D";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Discriminator,
    Generator,
}

impl Side {
    fn tag(self) -> &'static str {
        match self {
            Side::Discriminator => "d",
            Side::Generator => "g",
        }
    }
}

fn check_finite(v: Var<'_>, what: &str) -> Result<()> {
    if v.value().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Logistic GAN loss, averaged over every logit. The discriminator side is
/// cross-entropy toward targets `1 - smoothing` (real) and 0 (fake); the
/// generator side is the non-saturating `softplus(-fake)`.
pub fn gan_loss<'t>(real: Option<Var<'t>>, fake: Var<'t>, side: Side, smoothing: f64) -> Result<Var<'t>> {
    check_finite(fake, "fake logits")?;
    match side {
        Side::Generator => Ok(fake.neg().softplus().mean()),
        Side::Discriminator => {
            let real = real.ok_or_else(|| Error::Shape("discriminator loss needs real logits".into()))?;
            check_finite(real, "real logits")?;
            let mut real_term = real.neg().softplus().mean();
            if smoothing != 0.0 {
                real_term = real_term.scale(1.0 - smoothing).add(real.softplus().mean().scale(smoothing));
            }
            Ok(real_term.add(fake.softplus().mean()))
        }
    }
}

/// One-sided smoothing for a head whose probe accuracy at selection is
/// strictly above `threshold`.
pub fn smoothing_gate(probe: &ProbeResult, epsilon: f64, threshold: f64) -> f64 {
    if probe.val_accuracy > threshold {
        epsilon
    } else {
        0.0
    }
}

/// A selected extractor with its trainable head.
#[derive(Debug, Clone)]
pub struct VisionDisc {
    pub model_id: String,
    pub head: HeadParams,
    pub adam: Adam,
    pub aug: AugPolicy,
    pub smoothing: f64,
    pub added_at: u64,
    pub probe_at_selection: ProbeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub step: u64,
    pub path: std::path::PathBuf,
    pub fid: f64,
}

/// Hyperparameters a step needs, lifted out of the config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub seed: u64,
    pub batch_size: usize,
    pub r1_gamma: f64,
    pub r1_interval: u64,
    pub r1_heads: bool,
    pub adapt_interval: u64,
}

impl StepSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            seed: cfg.run.seed,
            batch_size: cfg.optimizer.batch_size,
            r1_gamma: cfg.discriminator.r1_gamma,
            r1_interval: cfg.discriminator.r1_interval,
            r1_heads: cfg.discriminator.r1_heads,
            adapt_interval: cfg.augmentation.adapt_interval,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub generator: Generator,
    pub g_adam: Adam,
    pub discriminator: Discriminator,
    pub d_adam: Adam,
    pub d_aug: AugPolicy,
    pub vision: Vec<VisionDisc>,
    pub selection: SelectionState,
    /// Optimizer steps taken; images shown is `step * batch_size`.
    pub step: u64,
    pub schedule: Schedule,
    pub snapshots: Vec<SnapshotRecord>,
    /// Real logits seen since each adaptive policy's last update.
    pub sign_buffers: BTreeMap<String, Vec<f64>>,
    /// Best snapshot FID when the first model was added.
    pub baseline_fid: Option<f64>,
}

impl EnsembleState {
    /// Fresh networks for `cfg`; `candidates` are the selectable bank models.
    pub fn new(
        cfg: &ExperimentConfig,
        schedule: Schedule,
        candidates: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let seed = cfg.run.seed;
        let generator = Generator::new(cfg.generator, cfg.data.resolution, cfg.data.channels, seed)?;
        let discriminator = Discriminator::new(cfg.discriminator, cfg.data.resolution, cfg.data.channels, seed)?;
        let adam = cfg.optimizer.adam();
        Ok(Self {
            g_adam: Adam::new(adam, &generator.params),
            d_adam: Adam::new(adam, &discriminator.params),
            generator,
            discriminator,
            d_aug: cfg.augmentation.original.policy(ORIGINAL),
            vision: Vec::new(),
            selection: SelectionState::new(candidates, cfg.selection.k_max),
            step: 0,
            schedule,
            snapshots: Vec::new(),
            sign_buffers: BTreeMap::new(),
            baseline_fid: None,
        })
    }

    pub fn images_shown(&self, batch_size: usize) -> u64 {
        self.step * batch_size as u64
    }

    /// Bind `D` and every head on `tape`.
    pub fn bind_discriminators<'t>(&self, tape: &'t Tape, trainable: bool) -> Bindings<'t> {
        Bindings {
            d: self.discriminator.params.bind(tape, trainable),
            heads: self.vision.iter().map(|v| v.head.bind(tape, trainable)).collect(),
        }
    }

    /// Best snapshot by FID; ties go to the earliest step.
    pub fn best_snapshot(&self) -> Option<&SnapshotRecord> {
        self.snapshots.iter().fold(None, |best: Option<&SnapshotRecord>, s| match best {
            Some(b) if b.fid <= s.fid => Some(b),
            _ => Some(s),
        })
    }
}

pub struct Bindings<'t> {
    pub d: Bound<'t>,
    pub heads: Vec<Bound<'t>>,
}

/// One discriminator's contribution to the ensemble loss.
pub struct Term<'t> {
    pub id: String,
    pub loss: Var<'t>,
    /// Per-sample (reduced) logits on real images, discriminator side only.
    pub real_logits: Option<Vec<f64>>,
}

/// Rng for augmenting one input of one discriminator in one step.
pub fn aug_rng(seed: u64, step: u64, disc: &str, side: Side, input: &str) -> ChaCha8Rng {
    rng::stream(seed, &format!("aug:{disc}:{}:{input}@{step}", side.tag()))
}

pub fn latent(seed: u64, name: &str, n: usize, dim: usize) -> Tensor {
    let mut r = rng::stream(seed, name);
    Tensor::from_shape_simple_fn(ndarray::IxDyn(&[n, dim]), || r.sample(StandardNormal))
}

/// Term of the learned discriminator.
pub fn original_term<'t>(
    state: &EnsembleState,
    b: &Bindings<'t>,
    real: Option<Var<'t>>,
    fake: Var<'t>,
    side: Side,
    seed: u64,
) -> Result<Term<'t>> {
    let step = state.step;
    let d = &state.discriminator;
    let fake_aug = augment(fake, &state.d_aug, &mut aug_rng(seed, step, ORIGINAL, side, "fake"))?;
    let fake_l = d.forward(&b.d, fake_aug);
    let real_l = match real {
        Some(r) => Some(d.forward(&b.d, augment(r, &state.d_aug, &mut aug_rng(seed, step, ORIGINAL, side, "real"))?)),
        None => None,
    };
    let loss = gan_loss(real_l, fake_l, side, 0.0)?;
    Ok(Term { id: ORIGINAL.into(), loss, real_logits: real_l.map(|r| r.value().iter().copied().collect()) })
}

/// Term of the `k`-th vision-aided discriminator. Multi-scale heads sum
/// their per-branch losses, each averaged over its logit grid.
#[allow(clippy::too_many_arguments)]
pub fn head_term<'t>(
    state: &EnsembleState,
    bank: &ModelBank,
    k: usize,
    b: &Bindings<'t>,
    real: Option<Var<'t>>,
    fake: Var<'t>,
    side: Side,
    seed: u64,
) -> Result<Term<'t>> {
    let v = &state.vision[k];
    let entry = bank.get(&v.model_id)?;
    let step = state.step;
    let logits = |x: Var<'t>, input: &str| -> Result<crate::heads::LogitSet<'t>> {
        let x = augment(x, &v.aug, &mut aug_rng(seed, step, &v.model_id, side, input))?;
        let feats = entry.extract(entry.preprocess(x)?)?;
        v.head.forward(&b.heads[k], &feats)
    };
    let fake_set = logits(fake, "fake")?;
    let (loss, real_logits) = match real {
        Some(r) => {
            let real_set = logits(r, "real")?;
            let mut loss = None;
            for (rb, fb) in real_set.branches.iter().zip(&fake_set.branches) {
                let l = gan_loss(Some(*rb), *fb, side, v.smoothing)?;
                loss = Some(match loss {
                    None => l,
                    Some(acc) => l.add(acc),
                });
            }
            let reduced: Vec<f64> = real_set.reduced.value().iter().copied().collect();
            (loss.unwrap(), Some(reduced))
        }
        None => {
            let mut loss = None;
            for fb in &fake_set.branches {
                let l = gan_loss(None, *fb, side, 0.0)?;
                loss = Some(match loss {
                    None => l,
                    Some(acc) => l.add(acc),
                });
            }
            (loss.unwrap(), None)
        }
    };
    Ok(Term { id: v.model_id.clone(), loss, real_logits })
}

/// Sum of the learned discriminator's loss and every head's loss, each on
/// its own augmented view of the batches. With no heads it is the plain GAN
/// loss.
pub fn vision_aided_loss<'t>(
    state: &EnsembleState,
    bank: &ModelBank,
    b: &Bindings<'t>,
    real: Option<Var<'t>>,
    fake: Var<'t>,
    side: Side,
    seed: u64,
) -> Result<(Var<'t>, Vec<Term<'t>>)> {
    let mut terms = vec![original_term(state, b, real, fake, side, seed)?];
    for k in 0..state.vision.len() {
        terms.push(head_term(state, bank, k, b, real, fake, side, seed)?);
    }
    let total = terms.iter().skip(1).fold(terms[0].loss, |acc, t| acc.add(t.loss));
    Ok((total, terms))
}

/// Gradient of the R1 penalty `(γ/2) E‖∇ₓ s(x)‖²` with respect to the
/// parameters of the score `s`, scaled by `scale`. The mixed second
/// derivative is a central difference of parameter gradients along the input
/// gradient: `(∇θ Σ s(x + h g) − ∇θ Σ s(x − h g)) / 2h`. Returns the penalty
/// value and the gradient blocks.
pub fn r1_gradient<F>(x: &Tensor, gamma: f64, scale: f64, score: F) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> Fn(&'t Tape, Var<'t>, bool) -> Result<(Var<'t>, Bound<'t>)>,
{
    let batch = x.shape()[0] as f64;
    let g = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (s, _) = score(&tape, xv, false)?;
        tape.backward(s).get_or_zeros(xv)
    };
    let penalty = 0.5 * gamma * g.iter().map(|v| v * v).sum::<f64>() / batch;
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let param_grads = |shift: &Tensor| -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let (s, p) = score(&tape, tape.constant(shift.clone()), true)?;
        Ok(p.grads(&tape.backward(s)))
    };
    if gmax == 0.0 {
        let zeros = param_grads(x)?.into_iter().map(|t| t * 0.0).collect();
        return Ok((penalty, zeros));
    }
    let h = 1e-3 / gmax;
    let plus = param_grads(&(x + &(&g * h)))?;
    let minus = param_grads(&(x - &(&g * h)))?;
    let c = gamma * scale / (batch * 2.0 * h);
    Ok((penalty, plus.into_iter().zip(minus).map(|(p, m)| (p - m) * c).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub d_losses: BTreeMap<String, f64>,
    pub g_losses: BTreeMap<String, f64>,
    pub r1: Option<f64>,
    /// Mean sign of the real logits in this batch, per discriminator.
    pub r_t: BTreeMap<String, f64>,
    pub p: BTreeMap<String, f64>,
}

fn mean_sign(v: &[f64]) -> f64 {
    v.iter()
        .map(|&x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / v.len() as f64
}

fn add_into(acc: &mut [Tensor], extra: Vec<Tensor>) {
    for (a, e) in acc.iter_mut().zip(extra) {
        *a += &e;
    }
}

/// One discriminator update (learned `D` and all heads) on a fresh latent
/// batch, then one generator update on another fresh latent batch.
pub fn train_step(state: &mut EnsembleState, bank: &ModelBank, data: &Dataset, s: &StepSettings) -> Result<StepReport> {
    let step = state.step;
    let seed = s.seed;
    let dim = state.generator.config.latent_dim;
    let real = data.sample_batch(s.batch_size, &mut rng::stream(seed, &format!("data@{step}")));
    let mut report = StepReport {
        step,
        d_losses: BTreeMap::new(),
        g_losses: BTreeMap::new(),
        r1: None,
        r_t: BTreeMap::new(),
        p: BTreeMap::new(),
    };

    // discriminators
    let fake = state.generator.sample(&latent(seed, &format!("z:d@{step}"), s.batch_size, dim));
    let (mut d_grads, mut head_grads, signs) = {
        let tape = Tape::new();
        let b = state.bind_discriminators(&tape, true);
        let (total, terms) = vision_aided_loss(
            state,
            bank,
            &b,
            Some(tape.constant(real.clone())),
            tape.constant(fake),
            Side::Discriminator,
            seed,
        )?;
        check_finite(total, &format!("discriminator loss at step {step}"))?;
        let grads = tape.backward(total);
        let mut signs = Vec::new();
        for t in &terms {
            report.d_losses.insert(t.id.clone(), t.loss.item());
            let logits = t.real_logits.clone().unwrap_or_default();
            report.r_t.insert(t.id.clone(), mean_sign(&logits));
            signs.push((t.id.clone(), logits));
        }
        (b.d.grads(&grads), b.heads.iter().map(|h| h.grads(&grads)).collect::<Vec<_>>(), signs)
    };
    if s.r1_gamma > 0.0 && step.is_multiple_of(s.r1_interval) {
        let scale = s.r1_interval as f64;
        let aug_real = |policy: &AugPolicy, disc: &str| -> Result<Tensor> {
            let tape = Tape::new();
            let x = augment(
                tape.constant(real.clone()),
                policy,
                &mut aug_rng(seed, step, disc, Side::Discriminator, "real"),
            )?;
            let v = x.value().clone();
            Ok(v)
        };
        let x = aug_real(&state.d_aug, ORIGINAL)?;
        let d = &state.discriminator;
        let (penalty, g) = r1_gradient(&x, s.r1_gamma, scale, |tape, xv, trainable| {
            let p = d.params.bind(tape, trainable);
            Ok((d.forward(&p, xv).sum(), p))
        })?;
        add_into(&mut d_grads, g);
        let mut total = penalty;
        if s.r1_heads {
            for (k, v) in state.vision.iter().enumerate() {
                let x = aug_real(&v.aug, &v.model_id)?;
                let entry = bank.get(&v.model_id)?;
                let (penalty, g) = r1_gradient(&x, s.r1_gamma, scale, |tape, xv, trainable| {
                    let p = v.head.bind(tape, trainable);
                    let feats = entry.extract(entry.preprocess(xv)?)?;
                    Ok((v.head.forward(&p, &feats)?.reduced.sum(), p))
                })?;
                add_into(&mut head_grads[k], g);
                total += penalty;
            }
        }
        report.r1 = Some(total);
    }
    state.d_adam.update(&mut state.discriminator.params, &d_grads);
    for (v, g) in state.vision.iter_mut().zip(head_grads) {
        v.adam.update(&mut v.head.params, &g);
    }
    if !state.discriminator.params.all_finite() || state.vision.iter().any(|v| !v.head.all_finite()) {
        return Err(Error::NonFinite(format!("discriminator parameters after step {step}")));
    }

    // augmentation controllers
    let adapt_now = (step + 1).is_multiple_of(s.adapt_interval);
    for (id, logits) in signs {
        let policy = if id == ORIGINAL {
            &mut state.d_aug
        } else {
            &mut state.vision.iter_mut().find(|v| v.model_id == id).unwrap().aug
        };
        if policy.mode == AugMode::Adaptive {
            let buf = state.sign_buffers.entry(id.clone()).or_default();
            buf.extend(logits);
            if adapt_now {
                let pooled = std::mem::take(buf);
                policy.adapt(&pooled)?;
            }
        }
        report.p.insert(id, policy.current_p);
    }

    // generator
    {
        let tape = Tape::new();
        let gp = state.generator.params.bind(&tape, true);
        let z = tape.constant(latent(seed, &format!("z:g@{step}"), s.batch_size, dim));
        let fake = state.generator.forward(&gp, z);
        let b = state.bind_discriminators(&tape, false);
        let (total, terms) = vision_aided_loss(state, bank, &b, None, fake, Side::Generator, seed)?;
        check_finite(total, &format!("generator loss at step {step}"))?;
        for t in &terms {
            report.g_losses.insert(t.id.clone(), t.loss.item());
        }
        let grads = gp.grads(&tape.backward(total));
        state.g_adam.update(&mut state.generator.params, &grads);
    }
    if !state.generator.params.all_finite() {
        return Err(Error::NonFinite(format!("generator parameters after step {step}")));
    }
    state.step += 1;
    Ok(report)
}
