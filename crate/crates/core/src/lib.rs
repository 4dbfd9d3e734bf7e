//! Vision-aided adversarial training for GANs.
//!
//! A generator is trained against an ensemble made of its own learned
//! discriminator plus shallow trainable heads sitting on top of frozen
//! feature extractors. Extractors are picked by how linearly separable
//! real and generated samples are in their feature space, and are added to
//! the ensemble progressively.

pub mod augmentation;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model_bank;
pub mod nn;
pub mod rng;
pub mod selection;
pub mod spatial;
pub mod training;

pub use error::{Error, Result};
