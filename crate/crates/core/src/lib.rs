//! Iterative prompt relabeling (IPR) on a toy conditional diffusion model.
//!
//! A small denoising diffusion model generates fixed-size scene latents
//! (a list of objects with category, optional color and a box). An exact
//! decoder stands in for the object detector. Generated samples whose
//! content disagrees with the prompt are relabeled to describe what was
//! actually generated, weighted by a rescaling factor, and fed back into
//! the model over one or more self-training iterations.
//!
//! Module map:
//!
//! - [`scenegen`]: prompt grammar, scene world, latent encoding, pretraining data
//! - [`tensornet`]: dense MLP with exact reverse-mode gradients, Adam, checkpoints
//! - [`ddpm`]: noise schedule, conditioning, rescaled loss, ancestral sampler
//! - [`detector`]: oracle detector with a score threshold and optional noise
//! - [`relabel`]: the relabeling rule and λ assignment
//! - [`trainloop`]: pretraining, dataset construction, method variants
//! - [`evalkit`]: spatial accuracy and run comparison
//! - [`config`] and [`lineage`]: experiment settings and seed substreams

pub mod config;
pub mod ddpm;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod lineage;
pub mod relabel;
pub mod scenegen;
pub mod tensornet;
pub mod trainloop;

pub use error::{Error, Result};
