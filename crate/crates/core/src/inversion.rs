//! Scene-to-token inversion: optimize a pseudo-token block so the frozen
//! denoiser explains renders of the scene, conditioning every step on the
//! sampled camera pose. Also carries the single-image baseline that skips
//! camera sampling entirely.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, Latent};
use crate::denoiser::{add_noise, DiffusionSchedule, UNet};
use crate::error::{Error, Result};
use crate::nn::{Adam, HasParams};
use crate::renderer::{render, Image};
use crate::rng::derive_rng;
use crate::scene::{camera_embedding, Camera, CameraEmbedding, CameraRig, Scene};
use crate::text_embed::{
    assemble_prompt, init_pseudo_token, PromptEmbedding, PromptSlot, PseudoToken, Vocabulary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Predict the injected noise (standard textual-inversion objective).
    EpsilonPrediction,
    /// Match the one-step denoised latent against the rendered latent.
    LatentReconstruction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub views_per_iteration: usize,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Vectors allocated to the pseudo token.
    pub num_vectors: usize,
    pub init_word: String,
    /// When false the camera pathway receives zeros (ablation switch).
    pub camera_conditioning: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 600,
            learning_rate: 5e-3,
            views_per_iteration: 4,
            loss_mode: LossMode::EpsilonPrediction,
            seed: 0,
            num_vectors: 32,
            init_word: "object".to_string(),
            camera_conditioning: true,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("inversion needs steps >= 1"));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::config("learning rate must be >= 0"));
        }
        if self.views_per_iteration == 0 {
            return Err(Error::config("views_per_iteration must be >= 1"));
        }
        if self.num_vectors == 0 {
            return Err(Error::config("num_vectors must be >= 1"));
        }
        Ok(())
    }
}

/// Everything observable about one inversion run.
#[derive(Debug, Clone)]
pub struct InversionTrace {
    /// One loss per optimization step.
    pub losses: Vec<f64>,
    /// Cameras sampled at each step (empty lists for the 2D baseline).
    pub cameras: Vec<Vec<Camera>>,
    pub final_embedding: PseudoToken,
}

impl HasParams for PseudoToken {
    fn params(&self) -> Vec<&[f64]> {
        vec![self.vectors.as_slice().unwrap()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.vectors.as_slice_mut().unwrap()]
    }
}

fn bare_prompt(z: &PseudoToken, vocab: &Vocabulary) -> Result<PromptEmbedding> {
    assemble_prompt(&[PromptSlot::Pseudo], Some(z), vocab)
}

fn gaussian_latent(shape: &[usize], factor: usize, rng: &mut ChaCha12Rng) -> Latent {
    Latent {
        values: Array3::from_shape_fn((shape[0], shape[1], shape[2]), |_| {
            rng.sample::<f64, _>(StandardNormal)
        }),
        factor,
    }
}

/// Compute the inversion loss for one prepared view group and its gradient
/// with respect to the pseudo vectors. This is the exact code path the
/// optimization loop takes, exposed so gradients can be checked externally.
/// Each view carries its own timestep; views are processed independently and
/// averaged.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    net: &UNet,
    schedule: &DiffusionSchedule,
    mode: LossMode,
    x0: &[Latent],
    x_t: &[Latent],
    eps: &[Latent],
    ts: &[usize],
    cams: &[CameraEmbedding],
    z: &PseudoToken,
    vocab: &Vocabulary,
) -> Result<(f64, Array2<f64>)> {
    if x_t.len() != ts.len() || x_t.len() != cams.len() || x_t.len() != eps.len() {
        return Err(Error::shape("per-view inputs must have equal lengths".to_string()));
    }
    let prompt = bare_prompt(z, vocab)?;
    let views = x_t.len() as f64;
    let numel = x_t[0].values.len() as f64;
    let per_view: Result<Vec<(f64, Array2<f64>)>> = (0..x_t.len())
        .into_par_iter()
        .map(|i| {
            let (out, caches) = net.forward_views(
                std::slice::from_ref(&x_t[i]),
                ts[i],
                &prompt,
                std::slice::from_ref(&cams[i]),
                None,
            )?;
            let pred = &out.eps_hat[0];
            let (loss, upstream) = match mode {
                LossMode::EpsilonPrediction => {
                    let diff = &pred.values - &eps[i].values;
                    let loss = diff.iter().map(|d| d * d).sum::<f64>() / numel;
                    let upstream = Latent {
                        values: diff.mapv(|d| 2.0 * d / (numel * views)),
                        factor: pred.factor,
                    };
                    (loss, upstream)
                }
                LossMode::LatentReconstruction => {
                    let abar = schedule.alpha_bar_at(ts[i]);
                    let (c, s) = (abar.sqrt(), (1.0 - abar).sqrt());
                    // One-step denoised estimate of the clean latent.
                    let x0_hat = (&x_t[i].values - &(&pred.values * s)) / c;
                    let diff = &x0_hat - &x0[i].values;
                    let loss = diff.iter().map(|d| d * d).sum::<f64>() / numel;
                    let upstream = Latent {
                        values: diff.mapv(|d| 2.0 * d / (numel * views) * (-s / c)),
                        factor: pred.factor,
                    };
                    (loss, upstream)
                }
            };
            let back = net.backward_views(&caches, std::slice::from_ref(&upstream))?;
            Ok((loss, back.g_prompt))
        })
        .collect();
    let mut loss = 0.0;
    let mut g_prompt: Option<Array2<f64>> = None;
    for (l, g) in per_view? {
        loss += l;
        g_prompt = Some(match g_prompt {
            None => g,
            Some(acc) => acc + g,
        });
    }
    loss /= views;
    // The bare-pseudo prompt maps gradient rows one-to-one onto z rows.
    Ok((loss, g_prompt.unwrap()))
}

/// Camera-conditioned inversion of a 3D scene into a pseudo-token block.
#[allow(clippy::too_many_arguments)]
pub fn invert3d(
    scene: &Scene,
    net: &UNet,
    schedule: &DiffusionSchedule,
    codec: &Codec,
    vocab: &Vocabulary,
    rig: &CameraRig,
    config: &InversionConfig,
) -> Result<(PseudoToken, InversionTrace)> {
    config.validate()?;
    rig.validate()?;
    let mut z = init_pseudo_token(&config.init_word, config.num_vectors, vocab)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = derive_rng(config.seed, "invert3d");
    let mut losses = Vec::with_capacity(config.steps);
    let mut cameras = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let cams: Vec<Camera> = (0..config.views_per_iteration)
            .map(|_| rig.sample(&mut rng))
            .collect();
        let mut x0 = Vec::with_capacity(cams.len());
        let mut x_t = Vec::with_capacity(cams.len());
        let mut eps = Vec::with_capacity(cams.len());
        let mut ts = Vec::with_capacity(cams.len());
        let mut cam_embs = Vec::with_capacity(cams.len());
        for cam in &cams {
            let image = render(scene, cam)?;
            let latent = codec.encode(&image)?;
            let t = rng.random_range(1..=schedule.timesteps);
            let noise = gaussian_latent(latent.values.shape(), latent.factor, &mut rng);
            x_t.push(add_noise(&latent, &noise, t, schedule)?);
            x0.push(latent);
            eps.push(noise);
            ts.push(t);
            cam_embs.push(if config.camera_conditioning {
                camera_embedding(cam)
            } else {
                CameraEmbedding::zeroed()
            });
        }
        let (loss, g_z) = loss_and_grad(
            net,
            schedule,
            config.loss_mode,
            &x0,
            &x_t,
            &eps,
            &ts,
            &cam_embs,
            &z,
            vocab,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "invert3d".into(),
                detail: format!("loss {loss} at step {step}"),
            });
        }
        let grads = PseudoToken {
            name: z.name.clone(),
            vectors: g_z,
            trainable: true,
        };
        adam.step(&mut z, &grads);
        losses.push(loss);
        cameras.push(cams);
    }
    let trace = InversionTrace {
        losses,
        cameras,
        final_embedding: z.clone(),
    };
    Ok((z, trace))
}

/// Single-image baseline: the same loop anchored to one fixed view with the
/// canonical identity pose as conditioning.
pub fn invert2d(
    image: &Image,
    net: &UNet,
    schedule: &DiffusionSchedule,
    codec: &Codec,
    vocab: &Vocabulary,
    config: &InversionConfig,
) -> Result<(PseudoToken, InversionTrace)> {
    config.validate()?;
    let mut z = init_pseudo_token(&config.init_word, config.num_vectors, vocab)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = derive_rng(config.seed, "invert2d");
    let latent = codec.encode(image)?;
    let cam_embs: Vec<CameraEmbedding> = (0..config.views_per_iteration)
        .map(|_| CameraEmbedding::identity())
        .collect();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut x0 = Vec::with_capacity(cam_embs.len());
        let mut x_t = Vec::with_capacity(cam_embs.len());
        let mut eps = Vec::with_capacity(cam_embs.len());
        let mut ts = Vec::with_capacity(cam_embs.len());
        for _ in 0..cam_embs.len() {
            let t = rng.random_range(1..=schedule.timesteps);
            let noise = gaussian_latent(latent.values.shape(), latent.factor, &mut rng);
            x_t.push(add_noise(&latent, &noise, t, schedule)?);
            x0.push(latent.clone());
            eps.push(noise);
            ts.push(t);
        }
        let (loss, g_z) = loss_and_grad(
            net,
            schedule,
            config.loss_mode,
            &x0,
            &x_t,
            &eps,
            &ts,
            &cam_embs,
            &z,
            vocab,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "invert2d".into(),
                detail: format!("loss {loss} at step {step}"),
            });
        }
        let grads = PseudoToken {
            name: z.name.clone(),
            vectors: g_z,
            trainable: true,
        };
        adam.step(&mut z, &grads);
        losses.push(loss);
    }
    let trace = InversionTrace {
        losses,
        cameras: vec![Vec::new(); config.steps],
        final_embedding: z.clone(),
    };
    Ok((z, trace))
}

/// Epsilon-prediction loss of an embedding on held-out cameras with common
/// random numbers, for comparing embeddings or conditioning variants.
#[allow(clippy::too_many_arguments)]
pub fn heldout_epsilon_loss(
    scene: &Scene,
    net: &UNet,
    schedule: &DiffusionSchedule,
    codec: &Codec,
    vocab: &Vocabulary,
    z: &PseudoToken,
    cameras: &[Camera],
    eval_timesteps: &[usize],
    seed: u64,
    camera_conditioning: bool,
) -> Result<f64> {
    let prompt = bare_prompt(z, vocab)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (ci, cam) in cameras.iter().enumerate() {
        let image = render(scene, cam)?;
        let latent = codec.encode(&image)?;
        let cam_emb = if camera_conditioning {
            camera_embedding(cam)
        } else {
            CameraEmbedding::zeroed()
        };
        for &t in eval_timesteps {
            let mut rng = derive_rng(seed, &format!("heldout-{ci}-{t}"));
            let noise = gaussian_latent(latent.values.shape(), latent.factor, &mut rng);
            let x_t = add_noise(&latent, &noise, t, schedule)?;
            let out = net.predict_noise(&[x_t], t, &prompt, std::slice::from_ref(&cam_emb), None)?;
            total += out.eps_hat[0].mse(&noise)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean of the final `window` losses over the mean of the first `window`.
pub fn loss_decrease_ratio(losses: &[f64], window: usize) -> f64 {
    let w = window.min(losses.len() / 2).max(1);
    let first: f64 = losses[..w].iter().sum::<f64>() / w as f64;
    let last: f64 = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
    last / first
}

/// Moving average used for the smoothed-trend check.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    if series.is_empty() || window == 0 {
        return Vec::new();
    }
    let w = window.min(series.len());
    let mut out = Vec::with_capacity(series.len() - w + 1);
    let mut sum: f64 = series[..w].iter().sum();
    out.push(sum / w as f64);
    for i in w..series.len() {
        sum += series[i] - series[i - w];
        out.push(sum / w as f64);
    }
    out
}
