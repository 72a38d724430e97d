//! Acceptance suite over the reference toy setup (the default config: fixed
//! corpus, fixed seeds, desk-scale denoiser). One test per criterion, each
//! printing a PASS/FAIL line:
//!
//!   cargo test -p tokensplat --test acceptance -- --nocapture

use once_cell::sync::Lazy;
use rand::Rng;

use tokensplat::codec::{Codec, CodecConfig, Latent};
use tokensplat::denoiser::{
    make_schedule, train_denoiser, AttentionControl, TrainSetup, UNet,
};
use tokensplat::distill::{
    generate_views, initial_cloud, reconstruct, reconstruct_with_draws, sds_draws, NoisePredictor,
    SdsConfig,
};
use tokensplat::inversion::{
    heldout_epsilon_loss, invert3d, loss_and_grad, InversionConfig, LossMode,
};
use tokensplat::nn::HasParams;
use tokensplat::pipeline::commands::{build_world, run_command, Command, CommandArgs, World};
use tokensplat::pipeline::{final_decile_mean, mean, psnr, RunConfig};
use tokensplat::renderer::{render, render_with_gradients, Image, SplatGradients};
use tokensplat::rng::derive_rng;
use tokensplat::scene::{camera_embedding, CameraEmbedding, GaussianSplat, Scene};
use tokensplat::text_embed::{init_pseudo_token, PseudoToken};

/// Seeds shared by every multi-seed criterion.
const SEEDS: [u64; 3] = [1001, 1002, 1003];

struct Fixture {
    world: World,
    net: UNet,
    /// Conditioned N=32 inversions, one per seed: (seed, z_star, losses).
    inversions: Vec<(u64, PseudoToken, Vec<f64>)>,
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let config = RunConfig::default();
    let world = build_world(&config, None).expect("reference world");
    let dcfg = config
        .denoiser
        .denoiser_config(world.codec.latent_channels());
    let mut setup = TrainSetup::new(&world.codec, &world.vocab, &world.rig);
    setup.views_per_scene = config.train.views_per_scene_pool;
    setup.learning_rate = config.train.learning_rate;
    let (net, _) = train_denoiser(
        &world.scenes,
        &world.captions,
        &dcfg,
        &world.schedule,
        config.train.steps,
        config.run.seed,
        &setup,
    )
    .expect("reference denoiser trains");
    let target = &world.scenes[config.corpus.target_scene];
    let inversions = SEEDS
        .iter()
        .map(|&seed| {
            let (z, trace) = invert3d(
                target,
                &net,
                &world.schedule,
                &world.codec,
                &world.vocab,
                &world.rig,
                &InversionConfig {
                    seed,
                    ..InversionConfig::default()
                },
            )
            .expect("reference inversion");
            (seed, z, trace.losses)
        })
        .collect();
    Fixture {
        world,
        net,
        inversions,
    }
});

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "[criterion {criterion:02}] {name}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn target_scene(fx: &Fixture) -> &Scene {
    &fx.world.scenes[RunConfig::default().corpus.target_scene]
}

// ---------------------------------------------------------------------------
// 1. Renderer gradient fidelity
// ---------------------------------------------------------------------------

fn fd_max_rel_error(
    scene: &Scene,
    grads: &[SplatGradients],
    mut loss: impl FnMut(&Scene) -> f64,
    step: f64,
) -> f64 {
    use nalgebra::UnitQuaternion;
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let fd = (plus - minus) / (2.0 * step);
        let denom = analytic.abs().max(fd.abs()).max(1e-6);
        worst = worst.max((analytic - fd).abs() / denom);
    };
    for (i, g) in grads.iter().enumerate() {
        for axis in 0..3 {
            for (field, grad) in [(0usize, g.position[axis]), (1, g.scale[axis]), (2, g.color[axis])] {
                let mut plus = scene.clone();
                let mut minus = scene.clone();
                let apply = |s: &mut GaussianSplat, delta: f64| match field {
                    0 => s.position[axis] += delta,
                    1 => s.scale[axis] += delta,
                    _ => s.color[axis] += delta,
                };
                apply(&mut plus.splats[i], step);
                apply(&mut minus.splats[i], -step);
                check(grad, loss(&plus), loss(&minus));
            }
        }
        for qi in 0..4 {
            let q = *scene.splats[i].rotation.as_ref();
            let mut arr = [q.w, q.i, q.j, q.k];
            arr[qi] += step;
            let mut plus = scene.clone();
            plus.splats[i].rotation = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                arr[0], arr[1], arr[2], arr[3],
            ));
            arr[qi] -= 2.0 * step;
            let mut minus = scene.clone();
            minus.splats[i].rotation = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                arr[0], arr[1], arr[2], arr[3],
            ));
            check(g.rotation[qi], loss(&plus), loss(&minus));
        }
        let mut plus = scene.clone();
        let mut minus = scene.clone();
        plus.splats[i].opacity += step;
        minus.splats[i].opacity -= step;
        check(g.opacity, loss(&plus), loss(&minus));
    }
    worst
}

#[test]
fn criterion_01_renderer_gradient_fidelity() {
    // Ten splats with staggered depths, away from clamp boundaries.
    let mut rng = derive_rng(177, "acceptance-gradcheck");
    let mut splats = Vec::new();
    for i in 0..10 {
        let q = nalgebra::Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        splats.push(GaussianSplat {
            position: nalgebra::Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                -0.7 + 0.15 * i as f64,
            ),
            scale: nalgebra::Vector3::new(
                rng.random_range(0.08..0.3),
                rng.random_range(0.08..0.3),
                rng.random_range(0.08..0.3),
            ),
            rotation: nalgebra::UnitQuaternion::from_quaternion(q),
            color: [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ],
            opacity: rng.random_range(0.3..0.8),
        });
    }
    let scene = Scene {
        splats,
        background: [0.2, 0.25, 0.3],
    };
    let cam = tokensplat::scene::Camera::orbit(20.0, 10.0, 2.0).with_resolution(24, 24);
    let weights =
        ndarray::Array3::from_shape_fn((24, 24, 3), |_| rng.random_range(-1.0..1.0));
    let loss = |s: &Scene| -> f64 {
        let img = render(s, &cam).unwrap();
        img.pixels.iter().zip(weights.iter()).map(|(a, b)| a * b).sum()
    };
    let start = std::time::Instant::now();
    let grads = render_with_gradients(&scene, &cam, &weights).unwrap();
    let worst = fd_max_rel_error(&scene, &grads, loss, 1e-4);
    let elapsed = start.elapsed();
    report(
        1,
        "renderer gradient fidelity",
        worst < 1e-3 && elapsed.as_secs() < 60,
        &format!("max relative error {worst:.2e} over 10 splats x 5 classes in {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// 2. Codec exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_codec_exactness() {
    let codec = Codec::from_config(&CodecConfig::default()).unwrap();
    let start = std::time::Instant::now();
    let mut max_err = 0.0f64;
    let mut max_energy_rel = 0.0f64;
    let mut rng = derive_rng(4242, "acceptance-codec");
    for _ in 0..100 {
        let img = Image {
            pixels: ndarray::Array3::from_shape_fn((64, 64, 3), |_| rng.random_range(0.0..1.0)),
        };
        let lat = codec.encode(&img).unwrap();
        let back = codec.decode(&lat).unwrap();
        for (a, b) in img.pixels.iter().zip(back.pixels.iter()) {
            max_err = max_err.max((a - b).abs());
        }
        let e_img: f64 = img.pixels.iter().map(|v| v * v).sum();
        let e_lat: f64 = lat.values.iter().map(|v| v * v).sum();
        max_energy_rel = max_energy_rel.max(((e_img - e_lat) / e_img).abs());
    }
    let elapsed = start.elapsed();
    report(
        2,
        "codec exactness",
        max_err < 1e-5 && max_energy_rel < 1e-6 && elapsed.as_secs() < 10,
        &format!(
            "round-trip max abs {max_err:.2e}, energy rel {max_energy_rel:.2e}, {elapsed:.2?} for 100 images"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Schedule constants
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_schedule_constants() {
    let s = make_schedule(0.00085, 0.012, 1000).unwrap();
    let endpoints = s.beta[0] == 0.00085 && s.beta[999] == 0.012;
    let mut decreasing = true;
    let mut prev = 1.0;
    for t in 1..=1000 {
        let a = s.alpha_bar_at(t);
        if !(a < prev && a > 0.0 && a < 1.0) {
            decreasing = false;
        }
        prev = a;
    }
    // Independent oracle: product via summed logs.
    let oracle = (0..1000)
        .map(|i| (1.0f64 - (0.00085 + (0.012 - 0.00085) * i as f64 / 999.0)).ln())
        .sum::<f64>()
        .exp();
    let oracle_err = (s.alpha_bar_at(1000) - oracle).abs();
    report(
        3,
        "schedule constants",
        endpoints && decreasing && oracle_err < 1e-12,
        &format!(
            "beta endpoints exact: {endpoints}, strictly decreasing: {decreasing}, |alpha_bar_T - oracle| = {oracle_err:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Attention re-weighting identity and locality
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_reweight_identity_and_locality() {
    let fx = &*FIXTURE;
    let start = std::time::Instant::now();
    let target = target_scene(fx);
    let mut rng = derive_rng(550, "acceptance-attn");
    let cams: Vec<_> = (0..2).map(|_| fx.world.rig.sample(&mut rng)).collect();
    let mut x_t = Vec::new();
    let mut cam_embs = Vec::new();
    for cam in &cams {
        let lat = fx.world.codec.encode(&render(target, cam).unwrap()).unwrap();
        let noise = Latent {
            values: ndarray::Array3::from_shape_fn(lat.values.raw_dim(), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            }),
            factor: lat.factor,
        };
        x_t.push(tokensplat::denoiser::add_noise(&lat, &noise, 350, &fx.world.schedule).unwrap());
        cam_embs.push(camera_embedding(cam));
    }
    let prompt = tokensplat::text_embed::assemble_prompt(
        &[tokensplat::text_embed::PromptSlot::Pseudo],
        Some(&fx.inversions[0].1),
        &fx.world.vocab,
    )
    .unwrap();
    let base = fx
        .net
        .predict_noise(&x_t, 350, &prompt, &cam_embs, None)
        .unwrap();
    let unit = AttentionControl::new(vec![3, 7], 1.0);
    let with_unit = fx
        .net
        .predict_noise(&x_t, 350, &prompt, &cam_embs, Some(&unit))
        .unwrap();
    let identical = base
        .eps_hat
        .iter()
        .zip(with_unit.eps_hat.iter())
        .all(|(a, b)| a.values == b.values)
        && base
            .maps
            .iter()
            .zip(with_unit.maps.iter())
            .all(|(a, b)| a.weights == b.weights);

    let amplified = AttentionControl::new(vec![3, 7], 2.5);
    let with_amp = fx
        .net
        .predict_noise(&x_t, 350, &prompt, &cam_embs, Some(&amplified))
        .unwrap();
    let mut locality = true;
    for (m0, m1) in base.maps.iter().zip(with_amp.maps.iter()) {
        for r in 0..m0.weights.shape()[0] {
            for j in 0..m0.weights.shape()[1] {
                let (a, b) = (m0.weights[(r, j)], m1.weights[(r, j)]);
                let ok = if j == 3 || j == 7 { b == 2.5 * a } else { b == a };
                if !ok {
                    locality = false;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        4,
        "attention re-weighting identity and locality",
        identical && locality && elapsed.as_secs() < 60,
        &format!(
            "c=1 bit-identical: {identical}; c=2.5 touches only controlled columns of {} maps; {elapsed:.2?}",
            base.maps.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Embedding edit identities
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_edit_identities() {
    let vocab = tokensplat::text_embed::Vocabulary::default_desk(7);
    let z = init_pseudo_token("object", 32, &vocab).unwrap();
    let delta = vocab.embedding("neon").unwrap() - vocab.embedding("red").unwrap();
    let lambda_zero = tokensplat::text_embed::edit_embedding(&z, &delta, 0.0).unwrap();
    let zero_delta =
        tokensplat::text_embed::edit_embedding(&z, &ndarray::Array1::zeros(vocab.dim()), 1.7)
            .unwrap();
    let composed_once = tokensplat::text_embed::edit_embedding(&z, &delta, 0.3 + 0.9).unwrap();
    let composed_twice = tokensplat::text_embed::edit_embedding(
        &tokensplat::text_embed::edit_embedding(&z, &delta, 0.3).unwrap(),
        &delta,
        0.9,
    )
    .unwrap();
    let composition_err = (&composed_once.vectors - &composed_twice.vectors)
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    let pass = lambda_zero.vectors == z.vectors
        && zero_delta.vectors == z.vectors
        && composition_err < 1e-12;
    report(
        5,
        "embedding edit identities",
        pass,
        &format!(
            "lambda=0 exact: {}, delta=0 exact: {}, composition max err {composition_err:.2e}",
            lambda_zero.vectors == z.vectors,
            zero_delta.vectors == z.vectors
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Inversion loss decrease
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_inversion_loss_decrease() {
    let fx = &*FIXTURE;
    let mut passes = 0;
    let mut details = Vec::new();
    for (seed, _, losses) in &fx.inversions {
        let first: f64 = mean(&losses[..50]);
        let last: f64 = mean(&losses[losses.len() - 50..]);
        let ratio = last / first;
        if ratio <= 0.5 {
            passes += 1;
        }
        details.push(format!("seed {seed}: {first:.4} -> {last:.4} (ratio {ratio:.3})"));
    }
    report(
        6,
        "inversion loss decrease",
        passes >= 2,
        &format!("{passes}/3 seeds at ratio <= 0.5 [{}]", details.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 7. Inversion gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_inversion_gradient_correctness() {
    let fx = &*FIXTURE;
    let target = target_scene(fx);
    let mut rng = derive_rng(71, "acceptance-invgrad");
    let cam = fx.world.rig.sample(&mut rng);
    let latent = fx.world.codec.encode(&render(target, &cam).unwrap()).unwrap();
    let t = 240;
    let noise = Latent {
        values: ndarray::Array3::from_shape_fn(latent.values.raw_dim(), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        }),
        factor: latent.factor,
    };
    let x_t = tokensplat::denoiser::add_noise(&latent, &noise, t, &fx.world.schedule).unwrap();
    let cam_embs = vec![camera_embedding(&cam)];
    let z = init_pseudo_token("object", 4, &fx.world.vocab).unwrap();
    let (x0v, xtv, epsv) = (vec![latent], vec![x_t], vec![noise]);
    let ts = vec![t];
    let (_, grad) = loss_and_grad(
        &fx.net,
        &fx.world.schedule,
        LossMode::EpsilonPrediction,
        &x0v,
        &xtv,
        &epsv,
        &ts,
        &cam_embs,
        &z,
        &fx.world.vocab,
    )
    .unwrap();
    let eval = |z: &PseudoToken| -> f64 {
        loss_and_grad(
            &fx.net,
            &fx.world.schedule,
            LossMode::EpsilonPrediction,
            &x0v,
            &xtv,
            &epsv,
            &ts,
            &cam_embs,
            z,
            &fx.world.vocab,
        )
        .unwrap()
        .0
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..4 {
        for j in (0..fx.world.vocab.dim()).step_by(5) {
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus.vectors[(i, j)] += h;
            minus.vectors[(i, j)] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = grad[(i, j)];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    report(
        7,
        "inversion gradient correctness",
        worst < 1e-3,
        &format!("pseudo-vector gradient vs finite differences, max rel err {worst:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 8. Camera-conditioning benefit
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_camera_conditioning_benefit() {
    let fx = &*FIXTURE;
    let target = target_scene(fx);
    let eval_cams = fx.world.rig.evaluation_cameras(8);
    let eval_ts = [100usize, 400, 700];
    let mut passes = 0;
    let mut details = Vec::new();
    for (seed, z_cond, _) in &fx.inversions {
        let zeroed_cfg = InversionConfig {
            seed: *seed,
            camera_conditioning: false,
            ..InversionConfig::default()
        };
        let (z_zero, _) = invert3d(
            target,
            &fx.net,
            &fx.world.schedule,
            &fx.world.codec,
            &fx.world.vocab,
            &fx.world.rig,
            &zeroed_cfg,
        )
        .unwrap();
        let loss_cond = heldout_epsilon_loss(
            target,
            &fx.net,
            &fx.world.schedule,
            &fx.world.codec,
            &fx.world.vocab,
            z_cond,
            &eval_cams,
            &eval_ts,
            999,
            true,
        )
        .unwrap();
        let loss_zero = heldout_epsilon_loss(
            target,
            &fx.net,
            &fx.world.schedule,
            &fx.world.codec,
            &fx.world.vocab,
            &z_zero,
            &eval_cams,
            &eval_ts,
            999,
            false,
        )
        .unwrap();
        if loss_cond <= loss_zero {
            passes += 1;
        }
        details.push(format!("seed {seed}: cond {loss_cond:.4} vs zeroed {loss_zero:.4}"));
    }
    report(
        8,
        "camera-conditioning benefit",
        passes >= 2,
        &format!("{passes}/3 seeds favor conditioning [{}]", details.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 9. Embedding-size ablation
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_embedding_size_ablation() {
    let fx = &*FIXTURE;
    let target = target_scene(fx);
    let mut passes = 0;
    let mut details = Vec::new();
    for (seed, _, losses32) in &fx.inversions {
        let (_, trace1) = invert3d(
            target,
            &fx.net,
            &fx.world.schedule,
            &fx.world.codec,
            &fx.world.vocab,
            &fx.world.rig,
            &InversionConfig {
                seed: *seed,
                num_vectors: 1,
                ..InversionConfig::default()
            },
        )
        .unwrap();
        let f32_loss = final_decile_mean(losses32);
        let f1_loss = final_decile_mean(&trace1.losses);
        if f32_loss <= f1_loss {
            passes += 1;
        }
        details.push(format!("seed {seed}: N=32 {f32_loss:.4} vs N=1 {f1_loss:.4}"));
    }
    report(
        9,
        "embedding-size ablation",
        passes >= 2,
        &format!("{passes}/3 seeds have N=32 <= N=1 [{}]", details.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 10. Inverted-vs-random generation margin
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_inverted_vs_random_margin() {
    let fx = &*FIXTURE;
    let target = target_scene(fx);
    let eval_cams = fx.world.rig.evaluation_cameras(8);
    let gt: Vec<Image> = eval_cams.iter().map(|c| render(target, c).unwrap()).collect();
    let fresh = init_pseudo_token("object", 32, &fx.world.vocab).unwrap();
    let mut margins = Vec::new();
    for (_, z, _) in &fx.inversions {
        let inv_views = generate_views(
            z,
            &eval_cams,
            &fx.net,
            &fx.world.schedule,
            &fx.world.codec,
            &fx.world.vocab,
            40,
            777,
            None,
        )
        .unwrap();
        let fresh_views = generate_views(
            &fresh,
            &eval_cams,
            &fx.net,
            &fx.world.schedule,
            &fx.world.codec,
            &fx.world.vocab,
            40,
            777,
            None,
        )
        .unwrap();
        let p_inv = mean(
            &inv_views
                .iter()
                .zip(gt.iter())
                .map(|(a, b)| psnr(a, b).unwrap())
                .collect::<Vec<_>>(),
        );
        let p_fresh = mean(
            &fresh_views
                .iter()
                .zip(gt.iter())
                .map(|(a, b)| psnr(a, b).unwrap())
                .collect::<Vec<_>>(),
        );
        margins.push(p_inv - p_fresh);
    }
    let mean_margin = mean(&margins);
    report(
        10,
        "inverted-vs-random margin",
        mean_margin >= 3.0,
        &format!(
            "mean PSNR margin {mean_margin:.2} dB (per seed: {})",
            margins
                .iter()
                .map(|m| format!("{m:.2}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. Score-distillation sanity
// ---------------------------------------------------------------------------

struct EchoSequence(std::cell::RefCell<std::collections::VecDeque<Latent>>);

impl NoisePredictor for EchoSequence {
    fn predict(
        &self,
        _x: &[Latent],
        _t: usize,
        _p: &tokensplat::text_embed::PromptEmbedding,
        _c: &[CameraEmbedding],
        _ctrl: Option<&AttentionControl>,
    ) -> tokensplat::Result<Vec<Latent>> {
        Ok(vec![self.0.borrow_mut().pop_front().expect("draw available")])
    }
}

#[test]
fn criterion_11_sds_sanity() {
    let fx = &*FIXTURE;
    // (a) Perfect-denoiser oracle: zero drift over 100 iterations.
    let z = init_pseudo_token("object", 4, &fx.world.vocab).unwrap();
    let initial = initial_cloud(8, 0.8, 17).unwrap();
    let oracle_cfg = SdsConfig {
        iterations: 100,
        scene_learning_rate: 0.05,
        seed: 3,
        ..SdsConfig::default()
    };
    let draws = sds_draws(&oracle_cfg, &fx.world.schedule, &fx.world.codec, &fx.world.rig).unwrap();
    let oracle = EchoSequence(std::cell::RefCell::new(
        draws.iter().map(|d| d.eps.clone()).collect(),
    ));
    let (oracle_scene, _) = reconstruct_with_draws(
        &z,
        &initial,
        &oracle_cfg,
        &oracle,
        &fx.world.schedule,
        &fx.world.codec,
        &fx.world.vocab,
        &draws,
        None,
        |_, _| {},
    )
    .unwrap();
    let zero_drift = oracle_scene == initial;

    // (b) Zero weight gives exactly zero gradients.
    let mut rng = derive_rng(81, "acceptance-sds");
    let cam = fx.world.rig.sample(&mut rng);
    let (c, lh, lw) = fx
        .world
        .codec
        .latent_shape_for(fx.world.rig.resolution.0, fx.world.rig.resolution.1)
        .unwrap();
    let eps = Latent {
        values: ndarray::Array3::from_shape_fn((c, lh, lw), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        }),
        factor: fx.world.codec.downsample_factor(),
    };
    let (grads, _) = tokensplat::distill::sds_gradient(
        target_scene(fx),
        &cam,
        &fx.inversions[0].1,
        300,
        &eps,
        0.0,
        &fx.net,
        &fx.world.schedule,
        &fx.world.codec,
        &fx.world.vocab,
        None,
    )
    .unwrap();
    let zero_weight = grads.iter().all(|g| g.max_abs() == 0.0);

    // (c) Residual trend on the reference reconstruction run.
    let sds_cfg = SdsConfig {
        iterations: 300,
        scene_learning_rate: 0.01,
        seed: 31,
        ..SdsConfig::default()
    };
    let start = initial_cloud(64, 0.85, 4242).unwrap();
    let (_, trace) = reconstruct(
        &fx.inversions[0].1,
        &start,
        &sds_cfg,
        &fx.net,
        &fx.world.schedule,
        &fx.world.codec,
        &fx.world.vocab,
        &fx.world.rig,
        None,
        |_, _| {},
    )
    .unwrap();
    let k = trace.len() / 10;
    let first = mean(&trace[..k]);
    let last = mean(&trace[trace.len() - k..]);
    let trend = last < first;
    report(
        11,
        "score-distillation sanity",
        zero_drift && zero_weight && trend,
        &format!(
            "oracle drift zero: {zero_drift}; w=0 grads zero: {zero_weight}; residual {first:.4} -> {last:.4}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 12. Reproducibility
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_reproducibility() {
    // Miniature config so the full command pipeline runs in seconds.
    let overrides: Vec<String> = [
        "camera.resolution=32",
        "denoiser.base_channels=16",
        "denoiser.views_per_step=2",
        "schedule.timesteps=60",
        "corpus.splats_per_scene=8",
        "train.steps=20",
        "train.views_per_scene_pool=4",
        "inversion.steps=6",
        "inversion.views_per_iteration=2",
        "inversion.num_vectors=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let config =
        tokensplat::pipeline::apply_overrides(&RunConfig::default(), &overrides).unwrap();
    let tmp = tempfile::tempdir().unwrap();

    let train_args = CommandArgs {
        out_dir: tmp.path().to_path_buf(),
        run_id: Some("train".into()),
        ..CommandArgs::default()
    };
    run_command(Command::TrainDenoiser, &config, &train_args).unwrap();
    let ckpt = tmp.path().join("train/denoiser.ckpt.json");

    let invert = |out: &std::path::Path, cfg: &RunConfig| {
        let args = CommandArgs {
            out_dir: out.to_path_buf(),
            run_id: Some("inv".into()),
            denoiser: Some(ckpt.clone()),
            ..CommandArgs::default()
        };
        run_command(Command::Invert, cfg, &args).unwrap().manifest.artifacts
    };
    let first = invert(&tmp.path().join("a"), &config);
    let second = invert(&tmp.path().join("b"), &config);
    let identical_rerun = first == second;

    // Re-execute from the manifest itself.
    let manifest_text =
        std::fs::read_to_string(tmp.path().join("a/inv/manifest.json")).unwrap();
    let from_manifest = tokensplat::pipeline::parse_config(&manifest_text).unwrap();
    let third = invert(&tmp.path().join("c"), &from_manifest);
    let identical_replay = first == third;

    report(
        12,
        "reproducibility",
        identical_rerun && identical_replay,
        &format!(
            "re-run hashes identical: {identical_rerun}; manifest replay identical: {identical_replay} ({} artifacts)",
            first.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// Companion checks on the reference setup (spec'd examples beyond the
// numbered criteria).
// ---------------------------------------------------------------------------

#[test]
fn companion_smoothed_inversion_loss_is_non_increasing() {
    let fx = &*FIXTURE;
    let mut passes = 0;
    let mut worst_rise = 0.0f64;
    for (_, _, losses) in &fx.inversions {
        let smoothed = tokensplat::inversion::moving_average(losses, 100);
        let half = smoothed.len() / 2;
        let tail = &smoothed[half..];
        let mut rise = 0.0f64;
        for w in tail.windows(2) {
            rise = rise.max(w[1] - w[0]);
        }
        worst_rise = worst_rise.max(rise);
        if rise <= 1e-4 {
            passes += 1;
        }
    }
    println!(
        "[companion] smoothed-loss monotonicity: {passes}/3 seeds, worst single-step rise {worst_rise:.2e}"
    );
    assert!(passes >= 2, "smoothed loss rises by {worst_rise}");
}

#[test]
fn companion_2d_baseline_generalizes_worse() {
    let fx = &*FIXTURE;
    let target = target_scene(fx);
    let eval_cams = fx.world.rig.evaluation_cameras(8);
    let eval_ts = [100usize, 400, 700];
    let front = eval_cams[0];
    let image = render(target, &front).unwrap();
    let (z2d, _) = tokensplat::inversion::invert2d(
        &image,
        &fx.net,
        &fx.world.schedule,
        &fx.world.codec,
        &fx.world.vocab,
        &InversionConfig {
            seed: SEEDS[0],
            ..InversionConfig::default()
        },
    )
    .unwrap();
    // Exclude the camera the 2D baseline saw.
    let heldout: Vec<_> = eval_cams[1..].to_vec();
    let loss_2d = heldout_epsilon_loss(
        target,
        &fx.net,
        &fx.world.schedule,
        &fx.world.codec,
        &fx.world.vocab,
        &z2d,
        &heldout,
        &eval_ts,
        999,
        true,
    )
    .unwrap();
    let loss_3d = heldout_epsilon_loss(
        target,
        &fx.net,
        &fx.world.schedule,
        &fx.world.codec,
        &fx.world.vocab,
        &fx.inversions[0].1,
        &heldout,
        &eval_ts,
        999,
        true,
    )
    .unwrap();
    println!("[companion] held-out loss: 2D baseline {loss_2d:.4} vs 3D inversion {loss_3d:.4}");
    assert!(
        loss_2d > loss_3d,
        "single-image embedding should generalize worse across views"
    );
}

#[test]
fn companion_style_amplification_is_monotone() {
    let fx = &*FIXTURE;
    let cams = fx.world.rig.evaluation_cameras(4);
    let z = &fx.inversions[0].1;
    let baseline = generate_views(
        z,
        &cams,
        &fx.net,
        &fx.world.schedule,
        &fx.world.codec,
        &fx.world.vocab,
        40,
        555,
        None,
    )
    .unwrap();
    let run_factor = |factor: f64| -> f64 {
        let request = tokensplat::personalize::EditRequest {
            style_words: vec!["neon".into()],
            attention_factor: factor,
            seed: 555,
            ..tokensplat::personalize::EditRequest::default()
        };
        let (views, _) = tokensplat::personalize::personalize_views(
            z,
            &request,
            &cams,
            &fx.net,
            &fx.world.schedule,
            &fx.world.codec,
            &fx.world.vocab,
            40,
            None,
        )
        .unwrap();
        mean(
            &views
                .iter()
                .zip(baseline.iter())
                .map(|(a, b)| {
                    a.pixels
                        .iter()
                        .zip(b.pixels.iter())
                        .map(|(x, y)| (x - y).abs())
                        .sum::<f64>()
                        / a.pixels.len() as f64
                })
                .collect::<Vec<_>>(),
        )
    };
    let d1 = run_factor(1.0);
    let d3 = run_factor(3.0);
    println!("[companion] style deviation: c=1 {d1:.5}, c=3 {d3:.5}");
    assert!(d3 > d1, "amplification should move the output further ({d1} vs {d3})");
}

#[test]
fn companion_styled_reconstruction_diverges_from_unstyled() {
    let fx = &*FIXTURE;
    let initial = initial_cloud(16, 0.85, 99).unwrap();
    let sds_cfg = SdsConfig {
        iterations: 40,
        scene_learning_rate: 0.01,
        seed: 77,
        ..SdsConfig::default()
    };
    let styled_request = tokensplat::personalize::EditRequest {
        style_words: vec!["neon".into()],
        attention_factor: 2.0,
        seed: 77,
        ..tokensplat::personalize::EditRequest::default()
    };
    let (styled, _, _) = tokensplat::personalize::personalize_scene(
        &fx.inversions[0].1,
        &styled_request,
        &initial,
        &sds_cfg,
        &fx.net,
        &fx.world.schedule,
        &fx.world.codec,
        &fx.world.vocab,
        &fx.world.rig,
    )
    .unwrap();
    let (unstyled, _) = reconstruct(
        &fx.inversions[0].1,
        &initial,
        &sds_cfg,
        &fx.net,
        &fx.world.schedule,
        &fx.world.codec,
        &fx.world.vocab,
        &fx.world.rig,
        None,
        |_, _| {},
    )
    .unwrap();
    let cams = fx.world.rig.evaluation_cameras(4);
    let diff = mean(
        &cams
            .iter()
            .map(|c| {
                let a = render(&styled, c).unwrap();
                let b = render(&unstyled, c).unwrap();
                a.pixels
                    .iter()
                    .zip(b.pixels.iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
                    / a.pixels.len() as f64
            })
            .collect::<Vec<_>>(),
    );
    println!("[companion] styled-vs-unstyled reconstruction mean abs pixel diff: {diff:.2e}");
    assert!(diff > 1e-6, "style edit had no effect on reconstruction");
}

#[test]
fn companion_frozen_weights_stay_frozen_through_the_pipeline() {
    let fx = &*FIXTURE;
    let net_hash = fx.net.parameter_hash();
    let vocab_hash = fx.world.vocab.content_hash();
    // Run a short inversion and reconstruction against the fixture.
    let (z, _) = invert3d(
        target_scene(fx),
        &fx.net,
        &fx.world.schedule,
        &fx.world.codec,
        &fx.world.vocab,
        &fx.world.rig,
        &InversionConfig {
            steps: 5,
            seed: 9,
            num_vectors: 2,
            ..InversionConfig::default()
        },
    )
    .unwrap();
    let initial = initial_cloud(4, 0.8, 1).unwrap();
    reconstruct(
        &z,
        &initial,
        &SdsConfig {
            iterations: 5,
            seed: 2,
            ..SdsConfig::default()
        },
        &fx.net,
        &fx.world.schedule,
        &fx.world.codec,
        &fx.world.vocab,
        &fx.world.rig,
        None,
        |_, _| {},
    )
    .unwrap();
    assert_eq!(fx.net.parameter_hash(), net_hash, "denoiser weights moved");
    assert_eq!(fx.world.vocab.content_hash(), vocab_hash, "vocabulary moved");
    let _ = fx.net.param_count();
}
