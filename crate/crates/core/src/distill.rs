//! Downstream reconstruction: embedding-driven multi-view generation and
//! score-distillation optimization of splat parameters. The noise-prediction
//! residual acts as a latent-space gradient that is chained through the codec
//! adjoint and the renderer backward pass; no gradient flows into the
//! denoiser itself.

use nalgebra::{UnitQuaternion, Vector3};
use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, Latent};
use crate::denoiser::{
    add_noise, sample, AttentionControl, DiffusionSchedule, SampleOutput, UNet,
};
use crate::error::{Error, Result};
use crate::nn::{Adam, HasParams};
use crate::renderer::{render, render_with_gradients, Image, SplatGradients};
use crate::rng::derive_rng;
use crate::scene::{camera_embedding, Camera, CameraEmbedding, CameraRig, Scene};
use crate::text_embed::{assemble_prompt, PromptEmbedding, PromptSlot, PseudoToken, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    Constant,
    OneMinusAlphaBar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdsConfig {
    pub iterations: usize,
    pub scene_learning_rate: f64,
    /// Inclusive timestep bounds sampled during reconstruction.
    pub timestep_range: (usize, usize),
    pub weight_fn: WeightFn,
    pub seed: u64,
}

impl Default for SdsConfig {
    fn default() -> Self {
        SdsConfig {
            iterations: 300,
            scene_learning_rate: 0.003,
            timestep_range: (0, 0), // resolved against the schedule when 0
            weight_fn: WeightFn::OneMinusAlphaBar,
            seed: 0,
        }
    }
}

impl SdsConfig {
    /// Default timestep range avoids the degenerate extremes.
    pub fn resolved_range(&self, schedule: &DiffusionSchedule) -> (usize, usize) {
        if self.timestep_range == (0, 0) {
            let t = schedule.timesteps as f64;
            (((0.02 * t).ceil() as usize).max(1), (0.98 * t).floor() as usize)
        } else {
            self.timestep_range
        }
    }

    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        let (lo, hi) = self.resolved_range(schedule);
        if !(1 <= lo && lo <= hi && hi <= schedule.timesteps) {
            return Err(Error::config(format!(
                "timestep range {lo}..={hi} invalid for T={}",
                schedule.timesteps
            )));
        }
        if self.scene_learning_rate < 0.0 {
            return Err(Error::config("scene learning rate must be >= 0"));
        }
        Ok(())
    }
}

/// Noise-prediction seam so oracles can stand in for the network.
pub trait NoisePredictor {
    fn predict(
        &self,
        x_t: &[Latent],
        t: usize,
        prompt: &PromptEmbedding,
        cams: &[CameraEmbedding],
        control: Option<&AttentionControl>,
    ) -> Result<Vec<Latent>>;
}

impl NoisePredictor for UNet {
    fn predict(
        &self,
        x_t: &[Latent],
        t: usize,
        prompt: &PromptEmbedding,
        cams: &[CameraEmbedding],
        control: Option<&AttentionControl>,
    ) -> Result<Vec<Latent>> {
        Ok(self.predict_noise(x_t, t, prompt, cams, control)?.eps_hat)
    }
}

fn bare_prompt(z: &PseudoToken, vocab: &Vocabulary) -> Result<PromptEmbedding> {
    assemble_prompt(&[PromptSlot::Pseudo], Some(z), vocab)
}

/// Generate one image per camera by jointly sampling latents conditioned on
/// the embedding, then decoding.
#[allow(clippy::too_many_arguments)]
pub fn generate_views(
    z_star: &PseudoToken,
    cameras: &[Camera],
    net: &UNet,
    schedule: &DiffusionSchedule,
    codec: &Codec,
    vocab: &Vocabulary,
    steps: usize,
    seed: u64,
    control: Option<&AttentionControl>,
) -> Result<Vec<Image>> {
    let prompt = bare_prompt(z_star, vocab)?;
    generate_views_with_prompt(&prompt, cameras, net, schedule, codec, steps, seed, control)
}

/// Generation entry point that accepts a fully assembled prompt (used by the
/// personalization path, which appends style words).
#[allow(clippy::too_many_arguments)]
pub fn generate_views_with_prompt(
    prompt: &PromptEmbedding,
    cameras: &[Camera],
    net: &UNet,
    schedule: &DiffusionSchedule,
    codec: &Codec,
    steps: usize,
    seed: u64,
    control: Option<&AttentionControl>,
) -> Result<Vec<Image>> {
    if cameras.is_empty() {
        return Err(Error::config("generate_views needs at least one camera"));
    }
    let (h, w) = cameras[0].resolution;
    if cameras.iter().any(|c| c.resolution != (h, w)) {
        return Err(Error::config("all cameras must share one resolution"));
    }
    let (_, lh, lw) = codec.latent_shape_for(h, w)?;
    let cam_embs: Vec<CameraEmbedding> = cameras.iter().map(camera_embedding).collect();
    let SampleOutput { latents, .. } = sample(
        net,
        prompt,
        &cam_embs,
        schedule,
        steps,
        seed,
        control,
        (lh, lw),
    )?;
    latents
        .iter()
        .map(|l| {
            codec.decode(&Latent {
                values: l.values.clone(),
                factor: codec.downsample_factor(),
            })
        })
        .collect()
}

/// Score-distillation gradient for one (camera, timestep, noise) draw.
///
/// Renders, encodes, noises, queries the predictor, and chains
/// `weight * (eps_hat - eps)` through the codec adjoint and the renderer
/// backward pass. The predictor is treated as a constant. Also returns the
/// RMS of the residual for tracing.
#[allow(clippy::too_many_arguments)]
pub fn sds_gradient<P: NoisePredictor + ?Sized>(
    scene: &Scene,
    camera: &Camera,
    z_star: &PseudoToken,
    t: usize,
    eps: &Latent,
    weight: f64,
    predictor: &P,
    schedule: &DiffusionSchedule,
    codec: &Codec,
    vocab: &Vocabulary,
    control: Option<&AttentionControl>,
) -> Result<(Vec<SplatGradients>, f64)> {
    let image = render(scene, camera)?;
    let x0 = codec.encode(&image)?;
    if x0.values.shape() != eps.values.shape() {
        return Err(Error::shape("noise shape does not match the latent".to_string()));
    }
    let x_t = add_noise(&x0, eps, t, schedule)?;
    let prompt = bare_prompt(z_star, vocab)?;
    let cam_emb = camera_embedding(camera);
    let eps_hat = predictor.predict(
        std::slice::from_ref(&x_t),
        t,
        &prompt,
        std::slice::from_ref(&cam_emb),
        control,
    )?;
    let residual = &eps_hat[0].values - &eps.values;
    let rms = (residual.iter().map(|r| r * r).sum::<f64>() / residual.len() as f64).sqrt();
    let g_latent = Latent {
        values: residual.mapv(|r| weight * r),
        factor: x0.factor,
    };
    let g_image = codec.encode_vjp(&image, &g_latent)?;
    let grads = render_with_gradients(scene, camera, &g_image)?;
    Ok((grads, rms))
}

/// Flat parameter buffers for the scene during optimization.
struct SceneParams {
    positions: Vec<f64>,
    scales: Vec<f64>,
    quats: Vec<f64>,
    colors: Vec<f64>,
    opacities: Vec<f64>,
}

impl HasParams for SceneParams {
    fn params(&self) -> Vec<&[f64]> {
        vec![
            &self.positions,
            &self.scales,
            &self.quats,
            &self.colors,
            &self.opacities,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.positions,
            &mut self.scales,
            &mut self.quats,
            &mut self.colors,
            &mut self.opacities,
        ]
    }
}

impl SceneParams {
    fn from_scene(scene: &Scene) -> Self {
        let n = scene.splats.len();
        let mut p = SceneParams {
            positions: Vec::with_capacity(3 * n),
            scales: Vec::with_capacity(3 * n),
            quats: Vec::with_capacity(4 * n),
            colors: Vec::with_capacity(3 * n),
            opacities: Vec::with_capacity(n),
        };
        for s in &scene.splats {
            p.positions.extend_from_slice(&[s.position.x, s.position.y, s.position.z]);
            p.scales.extend_from_slice(&[s.scale.x, s.scale.y, s.scale.z]);
            let q = s.rotation.as_ref();
            p.quats.extend_from_slice(&[q.w, q.i, q.j, q.k]);
            p.colors.extend_from_slice(&s.color);
            p.opacities.push(s.opacity);
        }
        p
    }

    fn from_gradients(grads: &[SplatGradients]) -> Self {
        let mut p = SceneParams {
            positions: Vec::with_capacity(3 * grads.len()),
            scales: Vec::with_capacity(3 * grads.len()),
            quats: Vec::with_capacity(4 * grads.len()),
            colors: Vec::with_capacity(3 * grads.len()),
            opacities: Vec::with_capacity(grads.len()),
        };
        for g in grads {
            p.positions.extend_from_slice(&g.position);
            p.scales.extend_from_slice(&g.scale);
            p.quats.extend_from_slice(&g.rotation);
            p.colors.extend_from_slice(&g.color);
            p.opacities.push(g.opacity);
        }
        p
    }

    /// Write back into the scene, projecting every splat onto the invariant
    /// set. Projections are exact no-ops for values already inside.
    fn store(&self, scene: &mut Scene) {
        for (i, s) in scene.splats.iter_mut().enumerate() {
            s.position = Vector3::new(
                self.positions[3 * i],
                self.positions[3 * i + 1],
                self.positions[3 * i + 2],
            );
            s.scale = Vector3::new(
                self.scales[3 * i].max(1e-4),
                self.scales[3 * i + 1].max(1e-4),
                self.scales[3 * i + 2].max(1e-4),
            );
            let q = nalgebra::Quaternion::new(
                self.quats[4 * i],
                self.quats[4 * i + 1],
                self.quats[4 * i + 2],
                self.quats[4 * i + 3],
            );
            let norm = q.norm();
            s.rotation = if norm < 1e-12 {
                UnitQuaternion::identity()
            } else if (norm - 1.0).abs() > 1e-12 {
                UnitQuaternion::from_quaternion(q)
            } else {
                UnitQuaternion::new_unchecked(q)
            };
            s.color = [
                self.colors[3 * i].clamp(0.0, 1.0),
                self.colors[3 * i + 1].clamp(0.0, 1.0),
                self.colors[3 * i + 2].clamp(0.0, 1.0),
            ];
            s.opacity = self.opacities[i].clamp(0.0, 1.0);
        }
    }
}

/// Seeded low-opacity splat cloud used as the default SDS starting point.
pub fn initial_cloud(num_splats: usize, extent: f64, seed: u64) -> Result<Scene> {
    let mut rng = derive_rng(seed, "sds-init-cloud");
    let mut splats = Vec::with_capacity(num_splats);
    for _ in 0..num_splats {
        let q = nalgebra::Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        splats.push(crate::scene::GaussianSplat {
            position: Vector3::new(
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
            ),
            scale: Vector3::new(
                rng.random_range(0.1..0.25) * extent,
                rng.random_range(0.1..0.25) * extent,
                rng.random_range(0.1..0.25) * extent,
            ),
            rotation: UnitQuaternion::from_quaternion(q),
            color: [0.5, 0.5, 0.5],
            opacity: rng.random_range(0.15..0.35),
        });
    }
    let scene = Scene {
        splats,
        background: [0.05, 0.05, 0.08],
    };
    scene.validate()?;
    Ok(scene)
}

/// One reconstruction draw: pose, timestep, and the noise to inject.
pub struct SdsDraw {
    pub camera: Camera,
    pub t: usize,
    pub eps: Latent,
}

/// The seeded draw sequence `reconstruct` consumes.
pub fn sds_draws(
    config: &SdsConfig,
    schedule: &DiffusionSchedule,
    codec: &Codec,
    rig: &CameraRig,
) -> Result<Vec<SdsDraw>> {
    config.validate(schedule)?;
    let (t_lo, t_hi) = config.resolved_range(schedule);
    let (channels, lh, lw) = codec.latent_shape_for(rig.resolution.0, rig.resolution.1)?;
    let mut rng = derive_rng(config.seed, "sds-reconstruct");
    Ok((0..config.iterations)
        .map(|_| {
            let camera = rig.sample(&mut rng);
            let t = rng.random_range(t_lo..=t_hi);
            let eps = Latent {
                values: Array3::from_shape_fn((channels, lh, lw), |_| {
                    rng.sample::<f64, _>(StandardNormal)
                }),
                factor: codec.downsample_factor(),
            };
            SdsDraw { camera, t, eps }
        })
        .collect())
}

/// Score-distillation reconstruction loop. `observer` runs after every
/// iteration with the current scene (used for turnaround exports).
#[allow(clippy::too_many_arguments)]
pub fn reconstruct<P: NoisePredictor + ?Sized>(
    z_star: &PseudoToken,
    initial: &Scene,
    config: &SdsConfig,
    predictor: &P,
    schedule: &DiffusionSchedule,
    codec: &Codec,
    vocab: &Vocabulary,
    rig: &CameraRig,
    control: Option<&AttentionControl>,
    observer: impl FnMut(usize, &Scene),
) -> Result<(Scene, Vec<f64>)> {
    let draws = sds_draws(config, schedule, codec, rig)?;
    reconstruct_with_draws(
        z_star, initial, config, predictor, schedule, codec, vocab, &draws, control, observer,
    )
}

/// Reconstruction over an explicit draw sequence (the seam oracle tests use).
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_with_draws<P: NoisePredictor + ?Sized>(
    z_star: &PseudoToken,
    initial: &Scene,
    config: &SdsConfig,
    predictor: &P,
    schedule: &DiffusionSchedule,
    codec: &Codec,
    vocab: &Vocabulary,
    draws: &[SdsDraw],
    control: Option<&AttentionControl>,
    mut observer: impl FnMut(usize, &Scene),
) -> Result<(Scene, Vec<f64>)> {
    config.validate(schedule)?;
    initial.validate()?;
    let mut scene = initial.clone();
    let mut params = SceneParams::from_scene(&scene);
    let mut adam = Adam::new(config.scene_learning_rate);
    let mut trace = Vec::with_capacity(draws.len());
    for (iter, draw) in draws.iter().enumerate() {
        let weight = match config.weight_fn {
            WeightFn::Constant => 1.0,
            WeightFn::OneMinusAlphaBar => 1.0 - schedule.alpha_bar_at(draw.t),
        };
        let (grads, rms) = sds_gradient(
            &scene,
            &draw.camera,
            z_star,
            draw.t,
            &draw.eps,
            weight,
            predictor,
            schedule,
            codec,
            vocab,
            control,
        )?;
        if grads.iter().any(|g| !g.max_abs().is_finite()) {
            return Err(Error::NonFinite {
                context: "sds reconstruction".into(),
                detail: format!("gradient at iteration {iter}"),
            });
        }
        let grad_params = SceneParams::from_gradients(&grads);
        adam.step(&mut params, &grad_params);
        params.store(&mut scene);
        trace.push(rms);
        observer(iter, &scene);
    }
    Ok((scene, trace))
}
