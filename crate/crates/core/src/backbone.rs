//! Small convolutional generator and discriminator used as the GAN backbone.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvTranspose2d, Linear, ParamStore};
use crate::rng;

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Channels of the 4x4 base map; each upsampling halves them.
    pub base_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { latent_dim: 64, base_channels: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Channels after the first strided conv; each further conv doubles them.
    pub base_channels: usize,
    /// R1 weight on the original discriminator.
    pub r1_gamma: f64,
    /// Lazy R1: applied every this many steps, scaled by the interval.
    pub r1_interval: u64,
    /// Also regularize the vision-aided heads.
    pub r1_heads: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 16, r1_gamma: 1.0, r1_interval: 16, r1_heads: false }
    }
}

fn doublings(resolution: usize) -> Result<usize> {
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(Error::Config {
            key: "data.resolution".into(),
            reason: format!("must be a power of two >= 8, got {resolution}"),
        });
    }
    Ok(resolution.trailing_zeros() as usize - 2)
}

/// `z -> linear -> (c, 4, 4) -> [convT 4x4 s2] x n -> tanh`.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub channels: usize,
    pub params: ParamStore,
    fc: Linear,
    ups: Vec<ConvTranspose2d>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, resolution: usize, channels: usize, seed: u64) -> Result<Self> {
        let n = doublings(resolution)?;
        if config.latent_dim == 0 || config.base_channels >> (n - 1) == 0 {
            return Err(Error::Config {
                key: "generator.base_channels".into(),
                reason: format!(
                    "needs at least {} channels for {n} upsamplings and a positive latent_dim",
                    1 << (n - 1)
                ),
            });
        }
        let mut r = rng::stream(seed, "init:generator");
        let mut params = ParamStore::new();
        let c0 = config.base_channels;
        let fc = Linear::new(&mut params, "fc", config.latent_dim, c0 * 16, &mut r);
        let mut ups = Vec::new();
        let mut c = c0;
        for i in 0..n {
            let out = if i + 1 == n { channels } else { c / 2 };
            ups.push(ConvTranspose2d::new(&mut params, &format!("up{i}"), c, out, 4, 2, 1, &mut r));
            c = out;
        }
        Ok(Self { config, channels, params, fc, ups })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Var<'t> {
        let b = z.shape()[0];
        let mut h = self.fc.forward(p, z).leaky_relu(SLOPE).reshape(&[b, self.config.base_channels, 4, 4]);
        for (i, up) in self.ups.iter().enumerate() {
            h = up.forward(p, h);
            h = if i + 1 == self.ups.len() { h.tanh() } else { h.leaky_relu(SLOPE) };
        }
        h
    }

    /// Images for a latent batch without recording gradients.
    pub fn sample(&self, z: &Tensor) -> Tensor {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(&p, tape.constant(z.clone()));
        let v = out.value().clone();
        v
    }
}

/// `[conv 4x4 s2 -> lrelu] x n -> linear -> logit`.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    convs: Vec<Conv2d>,
    out: Linear,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, resolution: usize, channels: usize, seed: u64) -> Result<Self> {
        let n = doublings(resolution)?;
        if config.base_channels == 0 {
            return Err(Error::Config { key: "discriminator.base_channels".into(), reason: "must be positive".into() });
        }
        let mut r = rng::stream(seed, "init:discriminator");
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let (mut cin, mut cout) = (channels, config.base_channels);
        for i in 0..n {
            convs.push(Conv2d::new(&mut params, &format!("down{i}"), cin, cout, 4, 2, 1, &mut r));
            cin = cout;
            cout *= 2;
        }
        let out = Linear::new(&mut params, "out", cin * 16, 1, &mut r);
        Ok(Self { config, params, convs, out })
    }

    /// `(batch,)` logits.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let b = x.shape()[0];
        let mut h = x;
        for c in &self.convs {
            h = c.forward(p, h).leaky_relu(SLOPE);
        }
        self.out.forward(p, h.flatten()).reshape(&[b])
    }
}
