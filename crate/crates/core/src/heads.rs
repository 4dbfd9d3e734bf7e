//! Trainable discriminator heads over frozen features.
//!
//! A head turns one extractor's features into real/fake logits. Single-scale
//! heads are `2x avg-downsample -> conv3x3(ch->W) -> lrelu -> linear(W*h*w->W)
//! -> lrelu -> linear(W->1)`. Multi-scale heads put a small patch classifier
//! `conv3x3(ch->W) -> lrelu -> downsample -> conv3x3(W->1)` on every spatial
//! output, producing a `grid x grid` logit map each, plus
//! `linear(d->W) -> lrelu -> linear(W->1)` on the token output.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model_bank::{FeatureExtractorSpec, HeadKind};
use crate::nn::{Bound, Conv2d, Linear, ParamStore};
use crate::rng;
use crate::spatial::adaptive_pool_matrix;

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden width; `None` picks 256, or 128 when a token output is 768 wide or more.
    pub width: Option<usize>,
    /// Side of each multi-scale branch's logit map.
    pub grid: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { width: None, grid: 3 }
    }
}

impl HeadConfig {
    pub fn resolved_width(&self, spec: &FeatureExtractorSpec) -> usize {
        self.width.unwrap_or_else(|| if spec.token_shapes().any(|s| s[0] >= 768) { 128 } else { 256 })
    }
}

#[derive(Debug, Clone)]
struct Branch {
    output: usize,
    conv: Conv2d,
    pool_rows: Rc<Array2<f64>>,
    pool_cols: Rc<Array2<f64>>,
    logit: Conv2d,
}

#[derive(Debug, Clone)]
enum Layout {
    Single { output: usize, conv: Conv2d, fc: Linear, out: Linear },
    Multi { branches: Vec<Branch>, token_output: usize, token_fc: Linear, token_out: Linear },
}

/// A head bound to one extractor spec.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub head_id: String,
    pub model_id: String,
    pub kind: HeadKind,
    pub params: ParamStore,
    layout: Layout,
}

/// Logits of one head for a batch.
pub struct LogitSet<'t> {
    /// One `(batch, cells)` tensor per branch; single-scale heads have one
    /// branch with one cell.
    pub branches: Vec<Var<'t>>,
    /// `(batch,)`: sum over branches of each branch's mean logit.
    pub reduced: Var<'t>,
}

impl HeadParams {
    pub fn build(spec: &FeatureExtractorSpec, config: &HeadConfig, init_seed: u64) -> Result<Self> {
        let width = config.resolved_width(spec);
        if width == 0 || config.grid == 0 {
            return Err(Error::InvalidSpec {
                id: spec.model_id.clone(),
                reason: "head width and grid must be positive".into(),
            });
        }
        let mut r = rng::stream(init_seed, &format!("head:{}", spec.model_id));
        let mut params = ParamStore::new();
        let layout = match spec.head_kind {
            HeadKind::SingleScale => {
                let (output, shape) = spec
                    .output_shapes
                    .iter()
                    .enumerate()
                    .find(|(_, s)| s.len() == 3)
                    .filter(|_| spec.output_shapes.len() == 1)
                    .ok_or_else(|| Error::InvalidSpec {
                        id: spec.model_id.clone(),
                        reason: "single_scale head needs exactly one spatial output".into(),
                    })?;
                let (c, h, w) = (shape[0], shape[1] / 2, shape[2] / 2);
                if h == 0 || w == 0 {
                    return Err(Error::InvalidSpec {
                        id: spec.model_id.clone(),
                        reason: format!("feature map {shape:?} too small for 2x downsampling"),
                    });
                }
                Layout::Single {
                    output,
                    conv: Conv2d::new(&mut params, "conv", c, width, 3, 1, 1, &mut r),
                    fc: Linear::new(&mut params, "fc", width * h * w, width, &mut r),
                    out: Linear::new(&mut params, "out", width, 1, &mut r),
                }
            }
            HeadKind::MultiScale => {
                let spatial = spec.spatial_shapes().count();
                let tokens = spec.token_shapes().count();
                if spatial < 2 || tokens != 1 {
                    return Err(Error::InvalidSpec {
                        id: spec.model_id.clone(),
                        reason: "multi_scale head needs two or more spatial outputs and one token output".into(),
                    });
                }
                let mut branches = Vec::new();
                let mut token = None;
                for (i, s) in spec.output_shapes.iter().enumerate() {
                    if s.len() == 3 {
                        let name = format!("branch{}", branches.len());
                        branches.push(Branch {
                            output: i,
                            conv: Conv2d::new(&mut params, &format!("{name}.conv"), s[0], width, 3, 1, 1, &mut r),
                            pool_rows: Rc::new(adaptive_pool_matrix(s[1], config.grid)),
                            pool_cols: Rc::new(adaptive_pool_matrix(s[2], config.grid)),
                            logit: Conv2d::new(&mut params, &format!("{name}.logit"), width, 1, 3, 1, 1, &mut r),
                        });
                    } else {
                        token = Some((i, s[0]));
                    }
                }
                let (token_output, dim) = token.expect("checked above");
                Layout::Multi {
                    branches,
                    token_output,
                    token_fc: Linear::new(&mut params, "token.fc", dim, width, &mut r),
                    token_out: Linear::new(&mut params, "token.out", width, 1, &mut r),
                }
            }
        };
        Ok(Self {
            head_id: format!("head:{}", spec.model_id),
            model_id: spec.model_id.clone(),
            kind: spec.head_kind,
            params,
            layout,
        })
    }

    /// Number of logit branches (1 for single-scale heads).
    pub fn branch_count(&self) -> usize {
        match &self.layout {
            Layout::Single { .. } => 1,
            Layout::Multi { branches, .. } => branches.len() + 1,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        self.params.bind(tape, trainable)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, feats: &[Var<'t>]) -> Result<LogitSet<'t>> {
        let batch = feats.first().map(|f| f.shape()[0]).ok_or_else(|| Error::Shape("no features".into()))?;
        let branches = match &self.layout {
            Layout::Single { output, conv, fc, out } => {
                let f = feature(feats, *output)?;
                if f.shape().len() != 4 {
                    return Err(Error::Shape(format!("single-scale head expects a spatial map, got {:?}", f.shape())));
                }
                let h = conv.forward(p, f.avg_pool2d(2)).leaky_relu(SLOPE).flatten();
                check_width(h, p.get(fc.weight).shape()[0])?;
                vec![out.forward(p, fc.forward(p, h).leaky_relu(SLOPE))]
            }
            Layout::Multi { branches, token_output, token_fc, token_out } => {
                let mut logits = Vec::new();
                for b in branches {
                    let f = feature(feats, b.output)?;
                    if f.shape().len() != 4 || f.shape()[1] != p.get(b.conv.weight).shape()[1] {
                        return Err(Error::Shape(format!("branch input {:?} does not match the head", f.shape())));
                    }
                    let h =
                        b.conv.forward(p, f).leaky_relu(SLOPE).spatial_map(b.pool_rows.clone(), b.pool_cols.clone());
                    let l = b.logit.forward(p, h);
                    let cells = l.shape()[2] * l.shape()[3];
                    logits.push(l.reshape(&[batch, cells]));
                }
                let t = feature(feats, *token_output)?;
                check_width(t, p.get(token_fc.weight).shape()[0])?;
                logits.push(token_out.forward(p, token_fc.forward(p, t).leaky_relu(SLOPE)));
                logits
            }
        };
        let reduced =
            branches.iter().map(|b| b.mean_axes_keep(&[1])).reduce(|a, b| a.add(b)).unwrap().reshape(&[batch]);
        Ok(LogitSet { branches, reduced })
    }

    pub fn all_finite(&self) -> bool {
        self.params.all_finite()
    }
}

fn feature<'t>(feats: &[Var<'t>], i: usize) -> Result<Var<'t>> {
    feats.get(i).copied().ok_or_else(|| Error::Shape(format!("missing feature output {i}")))
}

fn check_width(x: Var<'_>, expected: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 || s[1] != expected {
        return Err(Error::Shape(format!("head layer expects width {expected}, got {s:?}")));
    }
    Ok(())
}
