//! From-scratch trainer for the toy denoiser: epsilon-prediction MSE over
//! random scenes, pooled pre-rendered views, and uniform timesteps.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::codec::{Codec, Latent};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::rng::derive_rng;
use crate::scene::{camera_embedding, CameraEmbedding, CameraRig, Scene};
use crate::text_embed::{assemble_prompt, word_slots, PromptEmbedding, Vocabulary};

use super::{add_noise, DenoiserConfig, DiffusionSchedule, UNet};

/// Shared context the trainer needs besides the corpus itself.
pub struct TrainSetup<'a> {
    pub codec: &'a Codec,
    pub vocab: &'a Vocabulary,
    pub rig: &'a CameraRig,
    /// Pre-rendered poses per scene the trainer samples from.
    pub views_per_scene: usize,
    pub learning_rate: f64,
}

impl<'a> TrainSetup<'a> {
    pub fn new(codec: &'a Codec, vocab: &'a Vocabulary, rig: &'a CameraRig) -> Self {
        TrainSetup {
            codec,
            vocab,
            rig,
            views_per_scene: 64,
            learning_rate: 5e-3,
        }
    }
}

/// Stable hash of the training corpus, recorded in checkpoints.
pub fn corpus_hash(scenes: &[Scene], captions: &[Vec<String>]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (scene, caption) in scenes.iter().zip(captions.iter()) {
        h.update(crate::scene::scene_to_text(scene).as_bytes());
        for w in caption {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
    }
    crate::rng::to_hex(&h.finalize())
}

/// Train a fresh network: every step draws a scene, a group of pooled views,
/// one timestep, and per-view noise, then takes an Adam step on mean
/// eps-prediction MSE. Returns the network and the per-step loss curve.
pub fn train_denoiser(
    scenes: &[Scene],
    captions: &[Vec<String>],
    config: &DenoiserConfig,
    schedule: &DiffusionSchedule,
    steps: usize,
    seed: u64,
    setup: &TrainSetup,
) -> Result<(UNet, Vec<f64>)> {
    if scenes.is_empty() || scenes.len() != captions.len() {
        return Err(Error::config(
            "training corpus must be non-empty with one caption per scene",
        ));
    }
    for caption in captions {
        for w in caption {
            if !setup.vocab.contains(w) {
                return Err(Error::UnknownWord(w.clone()));
            }
        }
    }

    // Pre-render a pose pool per scene and encode to latents once.
    let mut pool_rng = derive_rng(seed, "train-view-pool");
    let mut pools: Vec<Vec<(Latent, CameraEmbedding)>> = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut pool = Vec::with_capacity(setup.views_per_scene);
        for _ in 0..setup.views_per_scene {
            let cam = setup.rig.sample(&mut pool_rng);
            let image = crate::renderer::render(scene, &cam)?;
            let latent = setup.codec.encode(&image)?;
            pool.push((latent, camera_embedding(&cam)));
        }
        pools.push(pool);
    }
    let prompts: Vec<PromptEmbedding> = captions
        .iter()
        .map(|c| assemble_prompt(&word_slots(c), None, setup.vocab))
        .collect::<Result<_>>()?;

    let mut net = UNet::init(config, seed)?;
    let mut adam = Adam::new(setup.learning_rate);
    let mut rng = derive_rng(seed, "train-steps");
    let mut losses = Vec::with_capacity(steps);
    let views = config.views_per_step;
    for step in 0..steps {
        let scene_idx = rng.random_range(0..scenes.len());
        let pool = &pools[scene_idx];
        let t = rng.random_range(1..=schedule.timesteps);
        let mut x_t = Vec::with_capacity(views);
        let mut cams = Vec::with_capacity(views);
        let mut eps = Vec::with_capacity(views);
        for _ in 0..views {
            let (latent, cam) = &pool[rng.random_range(0..pool.len())];
            let noise = Latent {
                values: Array3::from_shape_fn(latent.values.raw_dim(), |_| {
                    rng.sample::<f64, _>(StandardNormal)
                }),
                factor: latent.factor,
            };
            x_t.push(add_noise(latent, &noise, t, schedule)?);
            cams.push(cam.clone());
            eps.push(noise);
        }
        let (out, caches) = net.forward_views(&x_t, t, &prompts[scene_idx], &cams, None)?;
        let numel = out.eps_hat[0].values.len() as f64;
        let mut loss = 0.0;
        let mut upstream = Vec::with_capacity(views);
        for (pred, target) in out.eps_hat.iter().zip(eps.iter()) {
            let diff = &pred.values - &target.values;
            loss += diff.iter().map(|d| d * d).sum::<f64>() / numel;
            upstream.push(Latent {
                values: diff.mapv(|d| 2.0 * d / (numel * views as f64)),
                factor: pred.factor,
            });
        }
        loss /= views as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "denoiser training".into(),
                detail: format!("loss {loss} at step {step}"),
            });
        }
        losses.push(loss);
        let back = net.backward_views(&caches, &upstream)?;
        adam.step(&mut net, back.grads.as_ref());
    }
    net.trained = true;
    Ok((net, losses))
}
