//! Deterministic-stride sampling: seed-drawn initial noise, then a shared
//! denoising trajectory across the camera group so the views are generated
//! jointly against the same prompt context.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::codec::Latent;
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::scene::CameraEmbedding;
use crate::text_embed::PromptEmbedding;

use super::{AttentionControl, AttentionMap, DiffusionSchedule, UNet};

pub struct SampleOutput {
    /// One latent per requested camera.
    pub latents: Vec<Latent>,
    /// Non-fatal conditions, e.g. sampling from untrained weights.
    pub warnings: Vec<String>,
}

pub fn sample(
    net: &UNet,
    prompt: &PromptEmbedding,
    cameras: &[CameraEmbedding],
    schedule: &DiffusionSchedule,
    steps: usize,
    seed: u64,
    control: Option<&AttentionControl>,
    latent_hw: (usize, usize),
) -> Result<SampleOutput> {
    sample_impl(net, prompt, cameras, schedule, steps, seed, control, latent_hw, None)
}

/// Like [`sample`] but also appends every attention map produced along the
/// trajectory into `maps`.
pub fn sample_collecting_maps(
    net: &UNet,
    prompt: &PromptEmbedding,
    cameras: &[CameraEmbedding],
    schedule: &DiffusionSchedule,
    steps: usize,
    seed: u64,
    control: Option<&AttentionControl>,
    latent_hw: (usize, usize),
    maps: &mut Vec<AttentionMap>,
) -> Result<SampleOutput> {
    sample_impl(
        net,
        prompt,
        cameras,
        schedule,
        steps,
        seed,
        control,
        latent_hw,
        Some(maps),
    )
}

#[allow(clippy::too_many_arguments)]
fn sample_impl(
    net: &UNet,
    prompt: &PromptEmbedding,
    cameras: &[CameraEmbedding],
    schedule: &DiffusionSchedule,
    steps: usize,
    seed: u64,
    control: Option<&AttentionControl>,
    latent_hw: (usize, usize),
    mut map_sink: Option<&mut Vec<AttentionMap>>,
) -> Result<SampleOutput> {
    if cameras.is_empty() {
        return Err(Error::config("sample needs at least one camera"));
    }
    if steps == 0 || steps > schedule.timesteps {
        return Err(Error::config(format!(
            "steps {steps} outside 1..={}",
            schedule.timesteps
        )));
    }
    let mut warnings = Vec::new();
    if !net.trained {
        warnings.push("sampling from untrained denoiser weights".to_string());
    }
    let (lh, lw) = latent_hw;
    let channels = net.config.latent_channels;
    let mut rng = derive_rng(seed, "sample-init");
    let mut latents: Vec<Latent> = (0..cameras.len())
        .map(|_| Latent {
            values: Array3::from_shape_fn((channels, lh, lw), |_| {
                rng.sample::<f64, _>(StandardNormal)
            }),
            factor: 0,
        })
        .collect();

    // Descending timestep ladder T = t_steps > ... > t_1, with an implicit
    // final target of t = 0 where alpha_bar = 1.
    let ladder: Vec<usize> = (1..=steps)
        .rev()
        .map(|k| ((schedule.timesteps as f64) * k as f64 / steps as f64).round() as usize)
        .map(|t| t.max(1))
        .collect();

    for (idx, &t_hi) in ladder.iter().enumerate() {
        let t_lo = if idx + 1 < ladder.len() { ladder[idx + 1] } else { 0 };
        let out = net.predict_noise(&latents, t_hi, prompt, cameras, control)?;
        if let Some(sink) = map_sink.as_deref_mut() {
            sink.extend(out.maps);
        }
        let abar_hi = schedule.alpha_bar_at(t_hi);
        let abar_lo = schedule.alpha_bar_at(t_lo);
        let (c_hi, s_hi) = (abar_hi.sqrt(), (1.0 - abar_hi).sqrt());
        let (c_lo, s_lo) = (abar_lo.sqrt(), (1.0 - abar_lo).sqrt());
        for (x, eps_hat) in latents.iter_mut().zip(out.eps_hat.iter()) {
            let x0 = (&x.values - &(&eps_hat.values * s_hi)) / c_hi;
            x.values = &x0 * c_lo + &eps_hat.values * s_lo;
        }
    }
    Ok(SampleOutput { latents, warnings })
}
