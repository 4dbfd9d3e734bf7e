//! Linear-probe separability and model selection.
//!
//! Each candidate extractor is scored by training a logistic regression on
//! its frozen features to tell real from generated samples; the validation
//! negative cross-entropy is the score. Progressive selection adds the best
//! unused candidate, fixed selection takes the top K once.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softplus, Tensor};
use crate::error::{Error, Result};
use crate::model_bank::ModelBank;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Fraction of each class used for training; the rest validates.
    pub split_ratio: f64,
    /// Independent splits averaged into one result.
    pub runs: usize,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { split_ratio: 0.7, runs: 3, epochs: 100, l2: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub model_id: String,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// Mean negative binary cross-entropy on validation; higher is more separable.
    pub val_objective: f64,
    pub runs: usize,
    pub val_accuracy_std: f64,
}

/// Fitted logistic model on standardized features.
struct Logistic {
    mean: Array1<f64>,
    inv_std: Array1<f64>,
    w: Array1<f64>,
    b: f64,
}

impl Logistic {
    fn logits(&self, x: &Array2<f64>) -> Array1<f64> {
        let z = (x - &self.mean) * &self.inv_std;
        z.dot(&self.w) + self.b
    }

    /// Full-batch Nesterov-accelerated gradient descent on the L2-regularized
    /// cross-entropy, step size 1/L from a power-iteration bound.
    fn fit(x: &Array2<f64>, y: &Array1<f64>, epochs: usize, l2: f64) -> Self {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).unwrap();
        let var = x.var_axis(Axis(0), 0.0);
        let inv_std = var.mapv(|v| if v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 });
        let z = (x - &mean) * &inv_std;
        let lipschitz = 0.25 * (top_eigenvalue(&z) / n + 1.0) + l2;
        let step = 1.0 / lipschitz;
        let d = z.ncols();
        let (mut w, mut b) = (Array1::zeros(d), 0.0);
        let (mut w_prev, mut b_prev) = (Array1::<f64>::zeros(d), 0.0);
        for t in 0..epochs {
            let momentum = t as f64 / (t as f64 + 3.0);
            let wy = &w + &((&w - &w_prev) * momentum);
            let by = b + (b - b_prev) * momentum;
            let resid = (z.dot(&wy) + by).mapv(sigmoid) - y;
            let gw = z.t().dot(&resid) / n + &wy * l2;
            let gb = resid.sum() / n;
            w_prev = w;
            b_prev = b;
            w = &wy - &(gw * step);
            b = by - gb * step;
        }
        Logistic { mean, inv_std, w, b }
    }
}

/// Largest eigenvalue of `zᵀz` by power iteration.
fn top_eigenvalue(z: &Array2<f64>) -> f64 {
    let d = z.ncols();
    if d == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..50 {
        let u = z.t().dot(&z.dot(&v));
        let norm = u.dot(&u).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = u / norm;
    }
    lambda
}

fn accuracy(logits: &Array1<f64>, y: &Array1<f64>) -> f64 {
    let correct = logits.iter().zip(y).filter(|(&l, &t)| (l > 0.0) == (t > 0.5)).count();
    correct as f64 / y.len() as f64
}

fn neg_bce(logits: &Array1<f64>, y: &Array1<f64>) -> f64 {
    let total: f64 = logits.iter().zip(y).map(|(&l, &t)| softplus(l) - t * l).sum();
    -total / y.len() as f64
}

fn stack(real: &Array2<f64>, fake: &Array2<f64>, ri: &[usize], fi: &[usize]) -> (Array2<f64>, Array1<f64>) {
    let x = ndarray::concatenate(Axis(0), &[real.select(Axis(0), ri).view(), fake.select(Axis(0), fi).view()]).unwrap();
    let y = Array1::from_iter(std::iter::repeat_n(1.0, ri.len()).chain(std::iter::repeat_n(0.0, fi.len())));
    (x, y)
}

/// Train a logistic real-vs-fake classifier on `config.runs` stratified
/// random splits and report averaged train/validation statistics.
pub fn linear_probe(
    model_id: &str,
    real: &Array2<f64>,
    fake: &Array2<f64>,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    if real.ncols() != fake.ncols() {
        return Err(Error::Probe(format!("feature dims differ: {} vs {}", real.ncols(), fake.ncols())));
    }
    if real.iter().chain(fake.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("probe features of `{model_id}`")));
    }
    if !(config.split_ratio > 0.0 && config.split_ratio < 1.0) || config.runs == 0 {
        return Err(Error::Probe("split_ratio must be in (0, 1) and runs >= 1".into()));
    }
    let split = |n: usize| {
        let train = ((n as f64) * config.split_ratio).round() as usize;
        (train, n.saturating_sub(train))
    };
    let ((rt, rv), (ft, fv)) = (split(real.nrows()), split(fake.nrows()));
    if rt < 2 || rv < 2 || ft < 2 || fv < 2 {
        return Err(Error::Probe(format!(
            "degenerate split: need >= 2 samples per class per split (real {}, fake {})",
            real.nrows(),
            fake.nrows()
        )));
    }
    let mut train_acc = Vec::new();
    let mut val_acc = Vec::new();
    let mut val_obj = Vec::new();
    for run in 0..config.runs {
        let mut r = rng::stream(config.seed, &format!("probe-split-{run}"));
        let mut ri: Vec<usize> = (0..real.nrows()).collect();
        let mut fi: Vec<usize> = (0..fake.nrows()).collect();
        ri.shuffle(&mut r);
        fi.shuffle(&mut r);
        let (xt, yt) = stack(real, fake, &ri[..rt], &fi[..ft]);
        let (xv, yv) = stack(real, fake, &ri[rt..], &fi[ft..]);
        let model = Logistic::fit(&xt, &yt, config.epochs, config.l2);
        train_acc.push(accuracy(&model.logits(&xt), &yt));
        let lv = model.logits(&xv);
        val_acc.push(accuracy(&lv, &yv));
        val_obj.push(neg_bce(&lv, &yv));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let va = mean(&val_acc);
    let std = if val_acc.len() > 1 {
        (val_acc.iter().map(|a| (a - va).powi(2)).sum::<f64>() / (val_acc.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(ProbeResult {
        model_id: model_id.to_string(),
        train_accuracy: mean(&train_acc),
        val_accuracy: va,
        val_objective: mean(&val_obj),
        runs: config.runs,
        val_accuracy_std: std,
    })
}

/// Order: objective descending, then accuracy descending, then id ascending.
pub fn ranking_order(a: &ProbeResult, b: &ProbeResult) -> Ordering {
    b.val_objective
        .total_cmp(&a.val_objective)
        .then(b.val_accuracy.total_cmp(&a.val_accuracy))
        .then(a.model_id.cmp(&b.model_id))
}

/// Probe every bank model not in `exclude` and sort by separability.
pub fn rank_models(
    bank: &ModelBank,
    generated: &Tensor,
    real: &Tensor,
    exclude: &BTreeSet<String>,
    config: &ProbeConfig,
) -> Result<Vec<ProbeResult>> {
    if generated.shape()[0] == 0 || real.shape()[0] == 0 {
        return Err(Error::Selection("empty sample batch".into()));
    }
    let candidates: Vec<_> = bank.entries().filter(|e| !exclude.contains(&e.spec.model_id)).collect();
    if candidates.is_empty() {
        return Err(Error::Selection("no candidate models left after exclusion".into()));
    }
    let mut results = candidates
        .iter()
        .map(|entry| {
            let fr = entry.features(real)?.flattened();
            let ff = entry.features(generated)?.flattened();
            linear_probe(&entry.spec.model_id, &fr, &ff, config)
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(ranking_order);
    Ok(results)
}

/// Top `k` models from a single ranking pass.
pub fn k_fixed_select(
    bank: &ModelBank,
    generated: &Tensor,
    real: &Tensor,
    k: usize,
    exclude: &BTreeSet<String>,
    config: &ProbeConfig,
) -> Result<Vec<String>> {
    let available = bank.entries().filter(|e| !exclude.contains(&e.spec.model_id)).count();
    if k > available {
        return Err(Error::Selection(format!("K = {k} exceeds the {available} available models")));
    }
    let ranking = rank_models(bank, generated, real, exclude, config)?;
    Ok(ranking.into_iter().take(k).map(|r| r.model_id).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    /// Models in order of addition.
    pub selected: Vec<String>,
    pub remaining: BTreeSet<String>,
    pub k_max: usize,
    pub history: Vec<(u64, Vec<ProbeResult>)>,
}

impl SelectionState {
    pub fn new(candidates: impl IntoIterator<Item = String>, k_max: usize) -> Self {
        Self { selected: Vec::new(), remaining: candidates.into_iter().collect(), k_max, history: Vec::new() }
    }

    pub fn is_full(&self) -> bool {
        self.selected.len() >= self.k_max
    }

    /// Move the best-ranked remaining model into the selected list.
    pub fn select_next(&mut self, step: u64, ranking: Vec<ProbeResult>) -> Result<String> {
        if self.is_full() {
            return Err(Error::Selection(format!("K_max = {} models already selected", self.k_max)));
        }
        if self.remaining.is_empty() {
            return Err(Error::Selection("no remaining models".into()));
        }
        let pick = ranking
            .iter()
            .find(|r| self.remaining.contains(&r.model_id))
            .map(|r| r.model_id.clone())
            .ok_or_else(|| Error::Selection("ranking contains no remaining model".into()))?;
        self.remaining.remove(&pick);
        self.selected.push(pick.clone());
        self.history.push((step, ranking));
        Ok(pick)
    }
}
