//! Parameter storage, equalized-learning-rate layers and the Adam optimizer.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Tape, Tensor, Var};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered parameter blocks of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Register every block on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(b"VAPB")?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, v) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(v.ndim() as u16).to_le_bytes())?;
            for &d in v.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for x in v.as_standard_layout().iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Self> {
        fn bad(msg: &str) -> std::io::Error {
            std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string())
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"VAPB" {
            return Err(bad("bad parameter-block magic"));
        }
        let mut u32b = [0u8; 4];
        let mut u16b = [0u8; 2];
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u32b)?;
        let count = u32::from_le_bytes(u32b) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            r.read_exact(&mut u32b)?;
            let mut name = vec![0u8; u32::from_le_bytes(u32b) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("non-utf8 block name"))?;
            r.read_exact(&mut u16b)?;
            let mut shape = Vec::new();
            for _ in 0..u16::from_le_bytes(u16b) {
                r.read_exact(&mut u64b)?;
                shape.push(u64::from_le_bytes(u64b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut u64b)?;
                data.push(f64::from_le_bytes(u64b));
            }
            store.add(name, Tensor::from_shape_vec(IxDyn(&shape), data).map_err(|_| bad("bad block shape"))?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
        self.write_to(&mut f).at(path)?;
        f.flush().at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).at(path)?);
        Self::read_from(&mut f).at(path)
    }

    /// Copy values from `other`, which must have identical names and shapes.
    pub fn assign(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names || self.values.iter().zip(&other.values).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape("parameter store layout differs".into()));
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

/// Parameter blocks of one store as they appear on a particular tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients for every block, zero-filled where unreached.
    pub fn grads(&self, grads: &Grads) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_shape_simple_fn(IxDyn(shape), || rng.sample(StandardNormal))
}

/// Fully connected layer `y = x · (gain · W) + b` with `W` stored `(in, out)`
/// and initialized from N(0, 1); `gain = 1/sqrt(in)` keeps activations at
/// unit scale while the optimizer sees uniformly scaled weights.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gain: f64,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), randn(rng, &[fan_in, fan_out]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[fan_out])));
        Self { weight, bias, gain: 1.0 / (fan_in as f64).sqrt() }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(p.get(self.weight).scale(self.gain)).add(p.get(self.bias))
    }

    pub fn num_scalars(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gain: f64,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), randn(rng, &[cout, cin, kernel, kernel]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[cout])));
        Self { weight, bias, gain: 1.0 / ((cin * kernel * kernel) as f64).sqrt(), stride, pad }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.conv2d(p.get(self.weight).scale(self.gain), self.stride, self.pad).add_channel_bias(p.get(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gain: f64,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), randn(rng, &[cin, cout, kernel, kernel]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[cout])));
        // each output pixel sees cin * (kernel / stride)^2 inputs
        let fan_in = (cin * kernel * kernel) as f64 / (stride * stride) as f64;
        Self { weight, bias, gain: 1.0 / fan_in.sqrt(), stride, pad }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.conv_transpose2d(p.get(self.weight).scale(self.gain), self.stride, self.pad)
            .add_channel_bias(p.get(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.002, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers mirror the store they update.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| {
            let mut z = ParamStore::new();
            for (n, t) in s.iter() {
                z.add(n, Tensor::zeros(t.raw_dim()));
            }
            z
        };
        Self { config, step: 0, m: zeros(params), v: zeros(params) }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in
            params.values.iter_mut().zip(grads).zip(self.m.values.iter_mut()).zip(self.v.values.iter_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }

    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        self.m.save(&dir.join(format!("{prefix}.adam_m")))?;
        self.v.save(&dir.join(format!("{prefix}.adam_v")))
    }

    pub fn load(config: AdamConfig, step: u64, dir: &Path, prefix: &str) -> Result<Self> {
        Ok(Self {
            config,
            step,
            m: ParamStore::load(&dir.join(format!("{prefix}.adam_m")))?,
            v: ParamStore::load(&dir.join(format!("{prefix}.adam_v")))?,
        })
    }
}
