//! Desk-scale pipeline that aligns explicit Gaussian-splat scenes with a text
//! token space: a differentiable splat renderer, an image/latent codec, a small
//! camera- and text-conditioned denoiser with inspectable cross-attention, the
//! scene-to-token inversion loop, score-distillation reconstruction, and
//! prompt-space editing on top of the learned token block.
//!
//! Everything is seeded and deterministic: identical seeds reproduce identical
//! artifacts bit for bit, which is what the run manifests in [`pipeline`] rely on.

pub mod codec;
pub mod denoiser;
pub mod distill;
pub mod error;
pub mod inversion;
pub mod nn;
pub mod personalize;
pub mod pipeline;
pub mod renderer;
pub mod rng;
pub mod scene;
pub mod text_embed;

pub use error::{Error, Result};
