//! Differentiable augmentation with an adaptive strength controller.

use std::rc::Rc;

use ndarray::{Array4, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var, GATHER_ZERO};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    /// Each op fires per sample with probability `current_p`, which `adapt` steers.
    Adaptive,
    /// Every op always fires.
    Fixed,
    /// Inputs pass through untouched.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    Hflip,
    Translation,
    Color,
    Cutout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub policy_id: String,
    pub mode: AugMode,
    pub current_p: f64,
    pub target: f64,
    pub ops: Vec<AugOp>,
    pub adjust_step: f64,
}

impl AugPolicy {
    pub fn adaptive(policy_id: impl Into<String>, target: f64, ops: Vec<AugOp>) -> Self {
        Self { policy_id: policy_id.into(), mode: AugMode::Adaptive, current_p: 0.0, target, ops, adjust_step: 0.01 }
    }

    pub fn fixed(policy_id: impl Into<String>) -> Self {
        Self {
            policy_id: policy_id.into(),
            mode: AugMode::Fixed,
            current_p: 1.0,
            target: 0.0,
            ops: vec![AugOp::Translation, AugOp::Color, AugOp::Cutout],
            adjust_step: 0.0,
        }
    }

    pub fn none(policy_id: impl Into<String>) -> Self {
        Self {
            policy_id: policy_id.into(),
            mode: AugMode::None,
            current_p: 0.0,
            target: 0.0,
            ops: vec![],
            adjust_step: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.current_p) || !unit.contains(&self.target) || !unit.contains(&self.adjust_step) {
            return Err(Error::Augmentation(format!(
                "policy `{}`: p, target and adjust_step must lie in [0, 1]",
                self.policy_id
            )));
        }
        Ok(())
    }

    fn fire_probability(&self) -> f64 {
        match self.mode {
            AugMode::Adaptive => self.current_p,
            AugMode::Fixed => 1.0,
            AugMode::None => 0.0,
        }
    }

    /// One controller event: `r_t = mean(sign(real_logits))`, then p moves by
    /// `adjust_step` toward keeping `r_t` at the target.
    pub fn adapt(&mut self, real_logits: &[f64]) -> Result<f64> {
        if self.mode != AugMode::Adaptive {
            return Err(Error::Augmentation(format!("policy `{}` is not adaptive", self.policy_id)));
        }
        if real_logits.is_empty() {
            return Err(Error::Augmentation("adapt needs at least one logit".into()));
        }
        let r_t = real_logits.iter().map(|&l| sign(l)).sum::<f64>() / real_logits.len() as f64;
        let delta = if r_t > self.target { self.adjust_step } else { -self.adjust_step };
        self.current_p = (self.current_p + delta).clamp(0.0, 1.0);
        Ok(r_t)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Augment a `(batch, channels, height, width)` batch. Every op draws its
/// random parameters for every sample regardless of whether it fires, so the
/// rng advances identically for any `p`.
pub fn augment<'t>(x: Var<'t>, policy: &AugPolicy, rng: &mut impl Rng) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("augment expects a 4-D batch, got {s:?}")));
    }
    if policy.mode == AugMode::None {
        return Ok(x);
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let p = policy.fire_probability();
    let mut out = x;
    for op in &policy.ops {
        let fire: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < p).collect();
        out = match op {
            AugOp::Hflip => {
                let idx = remap(b, c, h, w, |n, y, xx| if fire[n] { Some((y, w - 1 - xx)) } else { Some((y, xx)) });
                if fire.iter().any(|&f| f) {
                    out.gather(Rc::new(idx), &s)
                } else {
                    out
                }
            }
            AugOp::Translation => {
                let max_y = (h / 8) as i64;
                let max_x = (w / 8) as i64;
                let shifts: Vec<(i64, i64)> =
                    (0..b).map(|_| (rng.random_range(-max_y..=max_y), rng.random_range(-max_x..=max_x))).collect();
                let idx = remap(b, c, h, w, |n, y, xx| {
                    let (dy, dx) = if fire[n] { shifts[n] } else { (0, 0) };
                    let (sy, sx) = (y as i64 - dy, xx as i64 - dx);
                    (sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64).then_some((sy as usize, sx as usize))
                });
                if fire.iter().zip(&shifts).any(|(&f, &d)| f && d != (0, 0)) {
                    out.gather(Rc::new(idx), &s)
                } else {
                    out
                }
            }
            AugOp::Color => {
                let draws: Vec<[f64; 3]> = (0..b).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
                if fire.iter().any(|&f| f) {
                    color(out, &fire, &draws)
                } else {
                    out
                }
            }
            AugOp::Cutout => {
                let (ch, cw) = (h.div_ceil(2), w.div_ceil(2));
                let centers: Vec<(usize, usize)> = (0..b)
                    .map(|_| (rng.random_range(0..h + (1 - h % 2)), rng.random_range(0..w + (1 - w % 2))))
                    .collect();
                if fire.iter().any(|&f| f) {
                    let mask = Array4::from_shape_fn((b, 1, h, w), |(n, _, y, xx)| {
                        let (cy, cx) = centers[n];
                        let inside =
                            y + ch / 2 >= cy && y < cy + ch - ch / 2 && xx + cw / 2 >= cx && xx < cx + cw - cw / 2;
                        if fire[n] && inside {
                            0.0
                        } else {
                            1.0
                        }
                    });
                    out.mul(out.tape().constant(mask.into_dyn()))
                } else {
                    out
                }
            }
        };
    }
    Ok(out)
}

/// Flattened gather indices for a per-pixel source map shared by all channels.
fn remap(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    src: impl Fn(usize, usize, usize) -> Option<(usize, usize)>,
) -> Vec<u32> {
    let mut idx = Vec::with_capacity(b * c * h * w);
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    idx.push(match src(n, y, xx) {
                        Some((sy, sx)) => (((n * c + ch) * h + sy) * w + sx) as u32,
                        None => GATHER_ZERO,
                    });
                }
            }
        }
    }
    idx
}

/// Brightness, saturation and contrast jitter. Non-firing samples get a zero
/// delta, which keeps them bitwise unchanged.
fn color<'t>(x: Var<'t>, fire: &[bool], draws: &[[f64; 3]]) -> Var<'t> {
    let tape = x.tape();
    let b = fire.len();
    let per_sample = |f: &dyn Fn(usize) -> f64| tape.constant(Tensor::from_shape_fn(IxDyn(&[b, 1, 1, 1]), |i| f(i[0])));
    let brightness = per_sample(&|n| draws[n][0] - 0.5);
    let saturation = per_sample(&|n| draws[n][1] * 2.0);
    let contrast = per_sample(&|n| draws[n][2] + 0.5);
    let mask = per_sample(&|n| if fire[n] { 1.0 } else { 0.0 });
    let y = x.add(brightness);
    let m = y.mean_axes_keep(&[1]);
    let y = y.sub(m).mul(saturation).add(m);
    let m = y.mean_axes_keep(&[1, 2, 3]);
    let y = y.sub(m).mul(contrast).add(m);
    x.add(y.sub(x).mul(mask))
}
