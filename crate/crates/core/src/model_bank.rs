//! Registry of frozen feature extractors.
//!
//! Each entry pairs a [`FeatureExtractorSpec`] with an immutable weight blob.
//! Extraction runs on an autograd [`Tape`] with the weights inserted as
//! constants, so gradients reach the input images but never the extractor.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, IoContext, Result};
use crate::spatial::resize_matrix;

pub mod surrogates;

/// Environment variable naming the weights cache directory.
pub const MODEL_DIR_ENV: &str = "VISIONAID_MODEL_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    SingleScale,
    MultiScale,
}

/// Per-channel normalization applied to images mapped into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Leaves `[0, 1]` images untouched.
    pub fn unit(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Maps `[0, 1]` images back onto `[-1, 1]`, i.e. the identity on raw input.
    pub fn symmetric(channels: usize) -> Self {
        Self { mean: vec![0.5; channels], std: vec![0.5; channels] }
    }

    /// Per-channel `(scale, shift)` taking a `[-1, 1]` pixel straight to its
    /// normalized value.
    fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        self.mean.iter().zip(&self.std).map(|(&m, &s)| (0.5 / s, (0.5 - m) / s)).unzip()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Tanh,
    LeakyRelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

/// How an extractor turns its weight blob and input into features.
///
/// Tap points name what each output is:
/// * `zero`: any tap name; every feature is zero.
/// * `pool`: `area` resizes the input to the declared spatial shape, `mean`
///   is the per-channel global average (token).
/// * `crop`: `crop` cuts the declared spatial window at `(top, left)`.
/// * `conv_net`: `layer{i}` is the activation of layer `i`, `pool{i}` its
///   per-channel global average (token).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ExtractorArch {
    Zero,
    Pool,
    Crop { top: usize, left: usize },
    ConvNet { layers: Vec<ConvLayer> },
}

impl ExtractorArch {
    fn weight_count(&self, in_channels: usize) -> usize {
        match self {
            ExtractorArch::ConvNet { layers } => {
                let mut c = in_channels;
                layers
                    .iter()
                    .map(|l| {
                        let n = l.out_channels * c * l.kernel * l.kernel + l.out_channels;
                        c = l.out_channels;
                        n
                    })
                    .sum()
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    pub model_id: String,
    pub input_resolution: usize,
    pub input_channels: usize,
    pub normalization: Normalization,
    /// `[c, h, w]` for spatial maps, `[d]` for token features.
    pub output_shapes: Vec<Vec<usize>>,
    pub tap_points: Vec<String>,
    pub head_kind: HeadKind,
    pub arch: ExtractorArch,
}

enum Tap {
    Area,
    Mean,
    Crop,
    Layer(usize),
    LayerMean(usize),
    Zero,
}

impl FeatureExtractorSpec {
    pub fn spatial_shapes(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.output_shapes.iter().filter(|s| s.len() == 3)
    }

    pub fn token_shapes(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.output_shapes.iter().filter(|s| s.len() == 1)
    }

    /// Total flattened feature width over all outputs.
    pub fn feature_dim(&self) -> usize {
        self.output_shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidSpec { id: self.model_id.clone(), reason: reason.into() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_id.is_empty() {
            return Err(self.invalid("empty model_id"));
        }
        if self.input_resolution == 0 || self.input_channels == 0 {
            return Err(self.invalid("input resolution and channels must be positive"));
        }
        let n = &self.normalization;
        if n.mean.len() != self.input_channels || n.std.len() != self.input_channels {
            return Err(self.invalid("normalization must have one mean/std per input channel"));
        }
        if n.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || n.mean.iter().any(|m| !m.is_finite()) {
            return Err(self.invalid("normalization std must be positive and finite"));
        }
        if self.output_shapes.is_empty() {
            return Err(self.invalid("output_shapes is empty"));
        }
        for s in &self.output_shapes {
            if !(s.len() == 1 || s.len() == 3) || s.contains(&0) {
                return Err(self.invalid(format!("bad output shape {s:?}")));
            }
        }
        if self.tap_points.len() != self.output_shapes.len() {
            return Err(self.invalid("one tap point is required per output shape"));
        }
        let (spatial, token) = (self.spatial_shapes().count(), self.token_shapes().count());
        match self.head_kind {
            HeadKind::SingleScale if spatial != 1 || token != 0 => {
                Err(self.invalid("single_scale requires exactly one spatial output"))
            }
            HeadKind::MultiScale if spatial < 2 || token != 1 => {
                Err(self.invalid("multi_scale requires at least two spatial outputs and exactly one token output"))
            }
            _ => Ok(()),
        }?;
        let taps = self.resolve_taps()?;
        let computed = self.computed_shapes(&taps)?;
        if computed != self.output_shapes {
            return Err(self.invalid(format!(
                "declared output shapes {:?} do not match the architecture's {:?}",
                self.output_shapes, computed
            )));
        }
        Ok(())
    }

    fn resolve_taps(&self) -> Result<Vec<Tap>> {
        let layer_count = match &self.arch {
            ExtractorArch::ConvNet { layers } => layers.len(),
            _ => 0,
        };
        self.tap_points
            .iter()
            .map(|t| {
                let tap = match (&self.arch, t.as_str()) {
                    (ExtractorArch::Zero, _) => Tap::Zero,
                    (ExtractorArch::Pool, "area") => Tap::Area,
                    (ExtractorArch::Pool, "mean") => Tap::Mean,
                    (ExtractorArch::Crop { .. }, "crop") => Tap::Crop,
                    (ExtractorArch::ConvNet { .. }, t) => {
                        let idx = |p: &str| t.strip_prefix(p).and_then(|i| i.parse::<usize>().ok());
                        match (idx("layer"), idx("pool")) {
                            (Some(i), _) if i < layer_count => Tap::Layer(i),
                            (_, Some(i)) if i < layer_count => Tap::LayerMean(i),
                            _ => return Err(self.invalid(format!("unknown tap point `{t}`"))),
                        }
                    }
                    (_, t) => return Err(self.invalid(format!("unknown tap point `{t}`"))),
                };
                Ok(tap)
            })
            .collect()
    }

    fn computed_shapes(&self, taps: &[Tap]) -> Result<Vec<Vec<usize>>> {
        let (c, r) = (self.input_channels, self.input_resolution);
        let mut layer_shapes = Vec::new();
        if let ExtractorArch::ConvNet { layers } = &self.arch {
            let mut h = r;
            for l in layers {
                if l.kernel == 0 || l.stride == 0 || h + 2 * (l.kernel / 2) < l.kernel {
                    return Err(self.invalid("conv layer does not fit its input"));
                }
                h = (h + 2 * (l.kernel / 2) - l.kernel) / l.stride + 1;
                layer_shapes.push((l.out_channels, h));
            }
        }
        Ok(taps
            .iter()
            .zip(&self.output_shapes)
            .map(|(tap, declared)| match *tap {
                Tap::Zero => declared.clone(),
                Tap::Area if declared.len() == 3 => vec![c, declared[1], declared[2]],
                Tap::Area => vec![],
                Tap::Mean => vec![c],
                Tap::Crop => match (&self.arch, declared.len()) {
                    (ExtractorArch::Crop { top, left }, 3) if top + declared[1] <= r && left + declared[2] <= r => {
                        vec![c, declared[1], declared[2]]
                    }
                    _ => vec![],
                },
                Tap::Layer(i) => vec![layer_shapes[i].0, layer_shapes[i].1, layer_shapes[i].1],
                Tap::LayerMean(i) => vec![layer_shapes[i].0],
            })
            .collect())
    }
}

/// Features of one batch, one array per declared output shape, each with a
/// leading batch dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOutput {
    pub model_id: String,
    pub features: Vec<Tensor>,
    pub batch_size: usize,
}

impl FeatureOutput {
    pub fn validate(&self) -> Result<()> {
        for f in &self.features {
            if f.shape().first() != Some(&self.batch_size) {
                return Err(Error::Shape(format!("feature batch {:?} != {}", f.shape(), self.batch_size)));
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("features of `{}`", self.model_id)));
            }
        }
        Ok(())
    }

    /// Row-per-sample concatenation of every output, flattened.
    pub fn flattened(&self) -> Array2<f64> {
        let parts: Vec<Array2<f64>> = self
            .features
            .iter()
            .map(|f| {
                let rest = f.len() / self.batch_size.max(1);
                f.as_standard_layout().to_shape((self.batch_size, rest)).unwrap().to_owned()
            })
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(ndarray::Axis(1), &views).unwrap()
    }
}

/// A registered extractor. Weights are immutable once registered.
#[derive(Debug)]
pub struct BankEntry {
    pub spec: FeatureExtractorSpec,
    weights: Arc<[f64]>,
    weights_hash: String,
    conv_params: Vec<(Tensor, Tensor)>,
    calls: AtomicU64,
}

pub fn weights_hash(weights: &[f64]) -> String {
    let mut h = Sha256::new();
    for w in weights {
        h.update(w.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl BankEntry {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_hash(&self) -> &str {
        &self.weights_hash
    }

    /// Fresh hash of the weight blob, for frozen-ness checks.
    pub fn checksum(&self) -> String {
        weights_hash(&self.weights)
    }

    /// Resize, convert channels and normalize `[-1, 1]` images for this
    /// extractor. Differentiable with respect to `images`.
    pub fn preprocess<'t>(&self, images: Var<'t>) -> Result<Var<'t>> {
        preprocess(images, &self.spec)
    }

    /// Number of `extract` calls so far.
    pub fn extraction_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Run the extractor on already preprocessed images.
    pub fn extract<'t>(&self, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let spec = &self.spec;
        let s = x.shape();
        if s.len() != 4 || s[1] != spec.input_channels || s[2] != spec.input_resolution || s[3] != spec.input_resolution
        {
            return Err(Error::Shape(format!(
                "`{}` expects (B, {}, {r}, {r}) input, got {s:?}",
                spec.model_id,
                spec.input_channels,
                r = spec.input_resolution
            )));
        }
        let batch = s[0];
        let tape = x.tape();
        let taps = spec.resolve_taps()?;
        let mut activations = Vec::new();
        if let ExtractorArch::ConvNet { layers } = &spec.arch {
            let mut h = x;
            for (l, (w, b)) in layers.iter().zip(&self.conv_params) {
                h = h
                    .conv2d(tape.constant(w.clone()), l.stride, l.kernel / 2)
                    .add_channel_bias(tape.constant(b.clone()));
                h = match l.activation {
                    Activation::None => h,
                    Activation::Tanh => h.tanh(),
                    Activation::LeakyRelu => h.leaky_relu(0.2),
                };
                activations.push(h);
            }
        }
        let outs = taps
            .iter()
            .zip(&spec.output_shapes)
            .map(|(tap, shape)| match *tap {
                Tap::Zero => {
                    let mut full = vec![batch];
                    full.extend(shape);
                    tape.constant(Tensor::zeros(IxDyn(&full)))
                }
                Tap::Area => x.spatial_map(
                    Rc::new(resize_matrix(spec.input_resolution, shape[1])),
                    Rc::new(resize_matrix(spec.input_resolution, shape[2])),
                ),
                Tap::Mean => x.mean_axes_keep(&[2, 3]).reshape(&[batch, shape[0]]),
                Tap::Crop => {
                    let ExtractorArch::Crop { top, left } = spec.arch else { unreachable!() };
                    let (c, r) = (spec.input_channels, spec.input_resolution);
                    let (h, w) = (shape[1], shape[2]);
                    let mut idx = Vec::with_capacity(batch * c * h * w);
                    for b in 0..batch {
                        for ch in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    idx.push((((b * c + ch) * r + top + y) * r + left + xx) as u32);
                                }
                            }
                        }
                    }
                    x.gather(Rc::new(idx), &[batch, c, h, w])
                }
                Tap::Layer(i) => activations[i],
                Tap::LayerMean(i) => activations[i].mean_axes_keep(&[2, 3]).reshape(&[batch, shape[0]]),
            })
            .collect();
        Ok(outs)
    }

    /// Preprocess and extract raw `[-1, 1]` images off-tape, in chunks.
    pub fn features(&self, images: &Tensor) -> Result<FeatureOutput> {
        const CHUNK: usize = 256;
        let n = images.shape()[0];
        let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); self.spec.output_shapes.len()];
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let tape = Tape::new();
            let x = tape.constant(images.slice_axis(ndarray::Axis(0), (start..end).into()).to_owned());
            let feats = self.extract(self.preprocess(x)?)?;
            for (p, f) in parts.iter_mut().zip(feats) {
                p.push(f.value().clone());
            }
            start = end;
        }
        let features = parts
            .into_iter()
            .map(|chunks| {
                let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
                ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
            })
            .collect();
        let out = FeatureOutput { model_id: self.spec.model_id.clone(), features, batch_size: n };
        out.validate()?;
        Ok(out)
    }
}

/// Map `[-1, 1]` images to an extractor's expected input: channel
/// replication for grayscale data, area/bilinear resize, per-channel affine
/// normalization.
pub fn preprocess<'t>(images: Var<'t>, spec: &FeatureExtractorSpec) -> Result<Var<'t>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected a (B, C, H, W) batch, got {s:?}")));
    }
    if images.value().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("images passed to preprocess".into()));
    }
    let (batch, channels, height, width) = (s[0], s[1], s[2], s[3]);
    let mut x = images;
    if channels != spec.input_channels {
        if channels == 1 && spec.input_channels == 3 {
            let plane = height * width;
            let mut idx = Vec::with_capacity(batch * 3 * plane);
            for b in 0..batch {
                for _ in 0..3 {
                    idx.extend((b * plane..(b + 1) * plane).map(|i| i as u32));
                }
            }
            x = x.gather(Rc::new(idx), &[batch, 3, height, width]);
        } else {
            return Err(Error::Shape(format!(
                "cannot convert {channels}-channel images for `{}` ({} channels)",
                spec.model_id, spec.input_channels
            )));
        }
    }
    let r = spec.input_resolution;
    if height != r || width != r {
        x = x.spatial_map(Rc::new(resize_matrix(height, r)), Rc::new(resize_matrix(width, r)));
    }
    let (scale, shift) = spec.normalization.affine();
    let c = spec.input_channels;
    let tape = x.tape();
    let scale = tape.constant(Tensor::from_shape_vec(IxDyn(&[1, c, 1, 1]), scale).unwrap());
    let shift = tape.constant(Tensor::from_shape_vec(IxDyn(&[1, c, 1, 1]), shift).unwrap());
    Ok(x.mul(scale).add(shift))
}

/// Registry of frozen extractors, in registration order.
#[derive(Debug, Default, Clone)]
pub struct ModelBank {
    entries: Vec<Arc<BankEntry>>,
    index: BTreeMap<String, usize>,
}

impl ModelBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_model(&mut self, spec: FeatureExtractorSpec, weights: Vec<f64>) -> Result<String> {
        spec.validate()?;
        if self.index.contains_key(&spec.model_id) {
            return Err(Error::DuplicateModel(spec.model_id));
        }
        let expected = spec.arch.weight_count(spec.input_channels);
        if weights.len() != expected {
            return Err(Error::Shape(format!(
                "`{}` weight blob has {} values, architecture needs {expected}",
                spec.model_id,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!("weights of `{}`", spec.model_id)));
        }
        let mut conv_params = Vec::new();
        if let ExtractorArch::ConvNet { layers } = &spec.arch {
            let (mut c, mut off) = (spec.input_channels, 0);
            for l in layers {
                let nw = l.out_channels * c * l.kernel * l.kernel;
                let w = Tensor::from_shape_vec(
                    IxDyn(&[l.out_channels, c, l.kernel, l.kernel]),
                    weights[off..off + nw].to_vec(),
                )
                .unwrap();
                off += nw;
                let b = Tensor::from_shape_vec(IxDyn(&[l.out_channels]), weights[off..off + l.out_channels].to_vec())
                    .unwrap();
                off += l.out_channels;
                conv_params.push((w, b));
                c = l.out_channels;
            }
        }
        let id = spec.model_id.clone();
        let entry = BankEntry {
            weights_hash: weights_hash(&weights),
            weights: weights.into(),
            spec,
            conv_params,
            calls: AtomicU64::new(0),
        };
        self.index.insert(id.clone(), self.entries.len());
        self.entries.push(Arc::new(entry));
        Ok(id)
    }

    pub fn list_models(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.spec.model_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, model_id: &str) -> Result<&Arc<BankEntry>> {
        self.index.get(model_id).map(|&i| &self.entries[i]).ok_or_else(|| Error::UnknownModel(model_id.to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = &Arc<BankEntry>> {
        self.entries.iter()
    }

    pub fn extract_features<'t>(&self, model_id: &str, images: Var<'t>) -> Result<Vec<Var<'t>>> {
        self.get(model_id)?.extract(images)
    }

    /// Weight checksums of every entry, in registration order.
    pub fn checksums(&self) -> Vec<(String, String)> {
        self.entries.iter().map(|e| (e.spec.model_id.clone(), e.checksum())).collect()
    }

    /// Write `manifest.toml` plus one `<hash>.bin` weight file per model.
    pub fn save(&self, manifest_path: &Path, model_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(model_dir).at(model_dir)?;
        let mut models = Vec::new();
        for e in &self.entries {
            let path = model_dir.join(format!("{}.bin", e.weights_hash));
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path).at(&path)?);
            for w in e.weights.iter() {
                f.write_all(&w.to_le_bytes()).at(&path)?;
            }
            f.flush().at(&path)?;
            models.push(ManifestEntry { spec: e.spec.clone(), weights_hash: e.weights_hash.clone() });
        }
        let text = toml::to_string_pretty(&Manifest { model: models })
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
        if let Some(parent) = manifest_path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        std::fs::write(manifest_path, text).at(manifest_path)
    }

    /// Load a manifest. Weights come from `model_dir`, else
    /// `$VISIONAID_MODEL_DIR`, else the manifest's own directory.
    pub fn load(manifest_path: &Path, model_dir: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).at(manifest_path)?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
        let dir = resolve_model_dir(manifest_path, model_dir);
        let mut bank = ModelBank::new();
        for m in manifest.model {
            let path = dir.join(format!("{}.bin", m.weights_hash));
            let bytes = std::fs::read(&path).at(&path)?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Data(format!("{} is not a whole number of f64s", path.display())));
            }
            let weights: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if weights_hash(&weights) != m.weights_hash {
                return Err(Error::Data(format!("{} does not match its content hash", path.display())));
            }
            bank.register_model(m.spec, weights)?;
        }
        Ok(bank)
    }
}

fn resolve_model_dir(manifest_path: &Path, explicit: Option<&Path>) -> PathBuf {
    if let Some(d) = explicit {
        return d.to_path_buf();
    }
    if let Some(d) = std::env::var_os(MODEL_DIR_ENV) {
        return PathBuf::from(d);
    }
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    #[serde(flatten)]
    spec: FeatureExtractorSpec,
    weights_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: Vec<ManifestEntry>,
}
