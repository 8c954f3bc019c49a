//! Bimanual diffusion policy that jointly denoises an action chunk and
//! future video-latent tokens.
//!
//! * [`schedule`]: square-cosine noise schedule and DDIM updates.
//! * [`latents`]: future-frame sampling, frame tokenizers and min/max scaling.
//! * [`model`]: observation encoder, joint denoising decoder, attention masks
//!   and checkpoints.
//! * [`train`]: demonstration collection, the joint loss and the training loop.
//! * [`eval`]: action-only sampling, rollouts, success rates and timing.
//! * [`ablate`]: resumable experiment grids and metric export.
//! * [`scalar_head`]: a one-dimensional conditional diffusion head for sampler checks.

pub mod ablate;
pub mod error;
pub mod eval;
pub mod latents;
pub mod model;
mod rng;
pub mod scalar_head;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
