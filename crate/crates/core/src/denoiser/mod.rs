//! Diffusion machinery: the linear beta schedule, forward noising, a small
//! camera- and text-conditioned U-Net noise predictor with inspectable
//! cross-attention, post-softmax attention re-weighting, multi-view sampling,
//! and from-scratch training.

mod sample;
mod train;
mod unet;

pub use sample::{sample, sample_collecting_maps, SampleOutput};
pub use train::{corpus_hash, train_denoiser, TrainSetup};
pub use unet::{BackwardOutput, CheckpointMeta, PredictOutput, UNet, ViewCache};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codec::Latent;
use crate::error::{Error, Result};
use crate::nn::ColumnReweight;

/// Linear beta schedule with precomputed cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    /// beta[i] is the noise rate at timestep t = i + 1.
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub timesteps: usize,
}

impl DiffusionSchedule {
    /// Cumulative product at 1-based timestep t; t = 0 returns 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
}

/// Betas interpolated linearly from `beta_start` at t=1 to `beta_end` at t=T.
pub fn make_schedule(beta_start: f64, beta_end: f64, timesteps: usize) -> Result<DiffusionSchedule> {
    if timesteps == 0 {
        return Err(Error::config("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta: Vec<f64> = if timesteps == 1 {
        vec![beta_start]
    } else {
        (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut product = 1.0;
    for a in &alpha {
        product *= a;
        alpha_bar.push(product);
    }
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
        timesteps,
    })
}

/// Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn add_noise(
    x0: &Latent,
    eps: &Latent,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Latent> {
    if t == 0 || t > schedule.timesteps {
        return Err(Error::config(format!(
            "timestep {t} outside 1..={}",
            schedule.timesteps
        )));
    }
    if x0.values.shape() != eps.values.shape() {
        return Err(Error::shape("x0 and eps shapes differ".to_string()));
    }
    let abar = schedule.alpha_bar_at(t);
    let (c0, c1) = (abar.sqrt(), (1.0 - abar).sqrt());
    Ok(Latent {
        values: &x0.values * c0 + &eps.values * c1,
        factor: x0.factor,
    })
}

/// Network shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub attention_heads: usize,
    pub text_dim: usize,
    pub camera_dim: usize,
    pub latent_channels: usize,
    pub views_per_step: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 32,
            attention_heads: 2,
            text_dim: crate::text_embed::DEFAULT_TEXT_DIM,
            camera_dim: 16,
            latent_channels: 192,
            views_per_step: 4,
            time_embed_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.camera_dim != 16 {
            return Err(Error::config("camera_dim must be 16"));
        }
        if self.views_per_step == 0 {
            return Err(Error::config("views_per_step must be >= 1"));
        }
        if self.base_channels % 8 != 0 || self.base_channels % self.attention_heads != 0 {
            return Err(Error::config(
                "base_channels must be divisible by 8 and by attention_heads",
            ));
        }
        if self.time_embed_dim % 2 != 0 || self.text_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim and text_dim must be even"));
        }
        Ok(())
    }
}

/// Cross-attention weights at one layer/timestep, rows stacked head-major:
/// row `head * queries + q` holds query q's distribution over prompt keys.
/// Rows sum to 1 before any re-weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub view: usize,
    pub timestep: usize,
    pub weights: Array2<f64>,
}

/// Post-softmax column amplification of chosen prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionControl {
    pub token_indices: Vec<usize>,
    pub factor: f64,
    pub active: bool,
}

impl AttentionControl {
    pub fn new(token_indices: Vec<usize>, factor: f64) -> Self {
        AttentionControl {
            token_indices,
            factor,
            active: true,
        }
    }

    pub fn validate(&self, prompt_len: usize) -> Result<()> {
        if self.factor < 0.0 {
            return Err(Error::config("attention factor must be >= 0"));
        }
        if let Some(&bad) = self.token_indices.iter().find(|&&i| i >= prompt_len) {
            return Err(Error::config(format!(
                "control index {bad} outside prompt of length {prompt_len}"
            )));
        }
        Ok(())
    }

    pub(crate) fn reweight(&self) -> Option<ColumnReweight> {
        if self.active {
            Some(ColumnReweight {
                indices: self.token_indices.clone(),
                factor: self.factor,
            })
        } else {
            None
        }
    }
}

/// Multiply controlled key columns of a map by the factor; everything else is
/// untouched, and nothing is renormalized.
pub fn reweight_attention(map: &AttentionMap, control: &AttentionControl) -> AttentionMap {
    let mut out = map.clone();
    if control.active {
        for &j in &control.token_indices {
            if j < out.weights.shape()[1] {
                for r in 0..out.weights.shape()[0] {
                    out.weights[(r, j)] *= control.factor;
                }
            }
        }
    }
    out
}
