//! Command implementations behind the CLI. Every command materializes its
//! world from the resolved config, writes artifacts through a fresh
//! [`RunDir`], and finishes with a manifest.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::codec::{Autoencoder, Codec, CodecMode};
use crate::denoiser::{
    make_schedule, train_denoiser, CheckpointMeta, DiffusionSchedule, TrainSetup, UNet,
};
use crate::distill::{generate_views, initial_cloud, sds_draws};
use crate::error::{Error, Result};
use crate::inversion::{invert3d, InversionTrace};
use crate::personalize::{personalize_views, EditRequest};
use crate::renderer::{render, Image};
use crate::rng::{derive_seed, to_hex};
use crate::scene::{make_synthetic_scene, scene_from_text, scene_to_text, CameraRig, Scene, SceneSpec};
use crate::text_embed::{
    read_embedding, write_embedding, EmbeddingMetadata, PseudoToken, Vocabulary,
};

use super::config::RunConfig;
use super::manifest::{load_manifest, RunDir};
use super::{final_decile_mean, mean, psnr, AblationRow, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainCodec,
    TrainDenoiser,
    Invert,
    Reconstruct,
    Edit,
    Ablate,
    Eval,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainCodec => "train-codec",
            Command::TrainDenoiser => "train-denoiser",
            Command::Invert => "invert",
            Command::Reconstruct => "reconstruct",
            Command::Edit => "edit",
            Command::Ablate => "ablate",
            Command::Eval => "eval",
        }
    }
}

/// External artifact paths a command may need.
#[derive(Debug, Clone, Default)]
pub struct CommandArgs {
    pub out_dir: PathBuf,
    pub run_id: Option<String>,
    pub denoiser: Option<PathBuf>,
    pub embedding: Option<PathBuf>,
    pub codec: Option<PathBuf>,
    /// Run directory to evaluate (eval only).
    pub eval_run: Option<PathBuf>,
}

/// Deterministic default run id: command, seed, and a config digest.
pub fn default_run_id(command: Command, config: &RunConfig) -> String {
    let digest = super::sha256_hex(serde_json::to_string(config).unwrap().as_bytes());
    format!("{}-s{}-{}", command.name(), config.run.seed, &digest[..8])
}

/// The materialized pieces most commands need.
pub struct World {
    pub scenes: Vec<Scene>,
    pub captions: Vec<Vec<String>>,
    pub vocab: Vocabulary,
    pub codec: Codec,
    pub schedule: DiffusionSchedule,
    pub rig: CameraRig,
}

pub fn build_world(config: &RunConfig, codec_ckpt: Option<&Path>) -> Result<World> {
    config.validate()?;
    let corpus = &config.corpus;
    let mut scenes = Vec::with_capacity(corpus.captions.len());
    for (i, palette) in corpus.palettes.iter().enumerate() {
        scenes.push(make_synthetic_scene(&SceneSpec {
            num_splats: corpus.splats_per_scene,
            seed: derive_seed(corpus.seed, &format!("corpus-scene-{i}")),
            palette: palette.clone(),
            extent: corpus.extent,
            background: corpus.background,
        })?);
    }
    let vocab = Vocabulary::new(
        crate::text_embed::DEFAULT_WORDS,
        config.denoiser.text_dim,
        config.vocab.seed,
    )?;
    let codec_config = config.codec.codec_config()?;
    let codec = match (codec_config.mode, codec_ckpt) {
        (CodecMode::Learned, Some(path)) => {
            let bytes = std::fs::read(path)
                .map_err(|e| Error::Artifact(format!("codec {}: {e}", path.display())))?;
            Codec::Learned(Autoencoder::from_checkpoint_bytes(&bytes)?)
        }
        _ => Codec::from_config(&codec_config)?,
    };
    let schedule = make_schedule(
        config.schedule.beta_start,
        config.schedule.beta_end,
        config.schedule.timesteps,
    )?;
    Ok(World {
        scenes,
        captions: corpus.captions.clone(),
        vocab,
        codec,
        schedule,
        rig: config.camera.rig(),
    })
}

fn load_denoiser(args: &CommandArgs, run: &mut RunDir) -> Result<(UNet, CheckpointMeta)> {
    let path = super::ensure(args.denoiser.clone(), "--denoiser checkpoint path")?;
    run.record_input("denoiser", &path)?;
    UNet::load_checkpoint(&path)
}

fn load_embedding_file(args: &CommandArgs, run: &mut RunDir) -> Result<(PseudoToken, EmbeddingMetadata)> {
    let path = super::ensure(args.embedding.clone(), "--embedding file path")?;
    run.record_input("embedding", &path)?;
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::Artifact(format!("embedding {}: {e}", path.display())))?;
    read_embedding(&bytes)
}

fn trace_text(trace: &InversionTrace) -> String {
    let mut out = String::from("# step\tloss\tcameras(az,el;...)\n");
    for (i, loss) in trace.losses.iter().enumerate() {
        let cams: Vec<String> = trace.cameras[i]
            .iter()
            .map(|c| format!("{:.3},{:.3}", c.azimuth_deg, c.elevation_deg))
            .collect();
        out.push_str(&format!("{i}\t{loss}\t{}\n", cams.join(";")));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct TraceJson {
    losses: Vec<f64>,
}

/// Render the target scene at the deterministic evaluation poses.
fn eval_renders(world: &World, config: &RunConfig) -> Result<(Vec<crate::scene::Camera>, Vec<Image>)> {
    let cams = world.rig.evaluation_cameras(config.generate.eval_cameras);
    let target = &world.scenes[config.corpus.target_scene];
    let renders: Result<Vec<Image>> = cams.iter().map(|c| render(target, c)).collect();
    Ok((cams, renders?))
}

/// A grid image: one row of views side by side.
fn image_row(images: &[Image]) -> Image {
    let h = images[0].height();
    let w: usize = images.iter().map(|i| i.width()).sum();
    let mut pixels = Array3::zeros((h, w, 3));
    let mut x0 = 0;
    for img in images {
        for i in 0..img.height() {
            for j in 0..img.width() {
                for c in 0..3 {
                    pixels[(i, x0 + j, c)] = img.pixels[(i, j, c)];
                }
            }
        }
        x0 += img.width();
    }
    Image { pixels }
}

pub fn run_command(command: Command, config: &RunConfig, args: &CommandArgs) -> Result<RunManifestOutcome> {
    let run_id = args
        .run_id
        .clone()
        .unwrap_or_else(|| default_run_id(command, config));
    let mut run = RunDir::create(&args.out_dir, &run_id, command.name(), config)?;
    let result = dispatch(command, config, args, &mut run);
    match result {
        Ok(()) => {
            let root = run.root.clone();
            let manifest = run.finalize()?;
            Ok(RunManifestOutcome { manifest, root })
        }
        Err(err) => {
            run.write_error(&err);
            Err(err)
        }
    }
}

pub struct RunManifestOutcome {
    pub manifest: super::RunManifest,
    pub root: PathBuf,
}

fn dispatch(command: Command, config: &RunConfig, args: &CommandArgs, run: &mut RunDir) -> Result<()> {
    match command {
        Command::GenData => gen_data(config, args, run),
        Command::TrainCodec => train_codec_cmd(config, args, run),
        Command::TrainDenoiser => train_denoiser_cmd(config, args, run),
        Command::Invert => invert_cmd(config, args, run),
        Command::Reconstruct => reconstruct_cmd(config, args, run),
        Command::Edit => edit_cmd(config, args, run),
        Command::Ablate => ablate_cmd(config, args, run),
        Command::Eval => eval_cmd(config, args, run),
    }
}

fn gen_data(config: &RunConfig, args: &CommandArgs, run: &mut RunDir) -> Result<()> {
    let world = build_world(config, args.codec.as_deref())?;
    let mut index = Vec::new();
    for (i, scene) in world.scenes.iter().enumerate() {
        let scene_rel = format!("scenes/scene_{i:03}.txt");
        run.write_text(&scene_rel, &scene_to_text(scene))?;
        let cams = world.rig.evaluation_cameras(4);
        let mut render_rels = Vec::new();
        for (vi, cam) in cams.iter().enumerate() {
            let img = render(scene, cam)?;
            let png_rel = format!("renders/scene_{i:03}_view_{vi}.png");
            run.write_png(&png_rel, &img)?;
            let arr_rel = format!("renders/scene_{i:03}_view_{vi}.arr");
            run.write_artifact(
                &arr_rel,
                &super::arrayio::to_bytes(img.pixels.shape(), img.pixels.as_slice().unwrap()),
            )?;
            render_rels.push(png_rel);
        }
        index.push(serde_json::json!({
            "scene": scene_rel,
            "caption": world.captions[i],
            "renders": render_rels,
        }));
    }
    run.write_json("corpus.json", &index)?;
    Ok(())
}

fn train_codec_cmd(config: &RunConfig, args: &CommandArgs, run: &mut RunDir) -> Result<()> {
    let codec_config = config.codec.codec_config()?;
    if codec_config.mode != CodecMode::Learned {
        return Err(Error::config("train-codec requires codec.mode = \"learned\""));
    }
    let world = build_world(config, args.codec.as_deref())?;
    let mut dataset = Vec::new();
    let mut rng = crate::rng::derive_rng(config.run.seed, "codec-dataset");
    for scene in &world.scenes {
        for _ in 0..config.train_codec.images_per_scene {
            let cam = world.rig.sample(&mut rng);
            dataset.push(render(scene, &cam)?);
        }
    }
    let (codec, losses) =
        crate::codec::train_codec(&dataset, &codec_config, config.train_codec.epochs, config.run.seed)?;
    let ae = match codec {
        Codec::Learned(ae) => ae,
        _ => unreachable!(),
    };
    run.write_artifact("codec.ckpt.json", &ae.to_checkpoint_bytes())?;
    let curve: String = losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i}\t{l}\n"))
        .collect();
    run.write_text("codec_loss.txt", &format!("# epoch\tmse\n{curve}"))?;
    run.write_json("codec_loss.json", &TraceJson { losses })?;
    Ok(())
}

fn train_denoiser_cmd(config: &RunConfig, args: &CommandArgs, run: &mut RunDir) -> Result<()> {
    let world = build_world(config, args.codec.as_deref())?;
    let denoiser_config = config
        .denoiser
        .denoiser_config(world.codec.latent_channels());
    let mut setup = TrainSetup::new(&world.codec, &world.vocab, &world.rig);
    setup.views_per_scene = config.train.views_per_scene_pool;
    setup.learning_rate = config.train.learning_rate;
    let (net, losses) = train_denoiser(
        &world.scenes,
        &world.captions,
        &denoiser_config,
        &world.schedule,
        config.train.steps,
        config.run.seed,
        &setup,
    )?;
    let meta = CheckpointMeta {
        config: denoiser_config,
        beta_start: config.schedule.beta_start,
        beta_end: config.schedule.beta_end,
        timesteps: config.schedule.timesteps,
        training_seed: config.run.seed,
        corpus_hash: crate::denoiser::corpus_hash(&world.scenes, &world.captions),
        trained: true,
    };
    run.write_artifact("denoiser.ckpt.json", &net.to_checkpoint_bytes(&meta))?;
    let curve: String = losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i}\t{l}\n"))
        .collect();
    run.write_text("train_loss.txt", &format!("# step\tloss\n{curve}"))?;
    run.write_json("train_loss.json", &TraceJson { losses })?;
    Ok(())
}

fn check_denoiser_compat(meta: &CheckpointMeta, config: &RunConfig, world: &World) -> Result<()> {
    if meta.config.latent_channels != world.codec.latent_channels() {
        return Err(Error::config(format!(
            "denoiser expects {} latent channels but codec produces {}",
            meta.config.latent_channels,
            world.codec.latent_channels()
        )));
    }
    if meta.timesteps != config.schedule.timesteps {
        return Err(Error::config(format!(
            "denoiser was trained with T={} but config says T={}",
            meta.timesteps, config.schedule.timesteps
        )));
    }
    Ok(())
}

fn invert_cmd(config: &RunConfig, args: &CommandArgs, run: &mut RunDir) -> Result<()> {
    let world = build_world(config, args.codec.as_deref())?;
    let (net, meta) = load_denoiser(args, run)?;
    check_denoiser_compat(&meta, config, &world)?;
    let inversion_config = config.inversion.inversion_config(config.run.seed)?;
    let target = &world.scenes[config.corpus.target_scene];
    let (z_star, trace) = invert3d(
        target,
        &net,
        &world.schedule,
        &world.codec,
        &world.vocab,
        &world.rig,
        &inversion_config,
    )?;
    let emb_meta = EmbeddingMetadata {
        init_word: inversion_config.init_word.clone(),
        training_seed: config.run.seed,
        run_id: run.manifest().run_id.clone(),
    };
    run.write_artifact("embedding.iv3d", &write_embedding(&z_star, &emb_meta))?;
    run.write_text("trace.txt", &trace_text(&trace))?;
    run.write_json(
        "trace.json",
        &TraceJson {
            losses: trace.losses.clone(),
        },
    )?;
    Ok(())
}

fn reconstruct_cmd(config: &RunConfig, args: &CommandArgs, run: &mut RunDir) -> Result<()> {
    let world = build_world(config, args.codec.as_deref())?;
    let (net, meta) = load_denoiser(args, run)?;
    check_denoiser_compat(&meta, config, &world)?;
    let (z_star, _) = load_embedding_file(args, run)?;
    let sds_config = config.sds.sds_config(config.run.seed)?;
    let initial = initial_cloud(
        config.sds.init_splats,
        config.corpus.extent,
        derive_seed(config.run.seed, "sds-init"),
    )?;
    let draws = sds_draws(&sds_config, &world.schedule, &world.codec, &world.rig)?;
    let every = config.sds.turnaround_every.max(1);
    let eval_cams = world.rig.evaluation_cameras(4);
    let mut turnarounds: Vec<(usize, Scene)> = Vec::new();
    let (scene, trace) = crate::distill::reconstruct_with_draws(
        &z_star,
        &initial,
        &sds_config,
        &net,
        &world.schedule,
        &world.codec,
        &world.vocab,
        &draws,
        None,
        |iter, current| {
            if (iter + 1) % every == 0 {
                turnarounds.push((iter + 1, current.clone()));
            }
        },
    )?;
    for (iter, snapshot) in &turnarounds {
        let views: Result<Vec<Image>> = eval_cams.iter().map(|c| render(snapshot, c)).collect();
        run.write_png(&format!("turnaround/iter_{iter:05}.png"), &image_row(&views?))?;
    }
    run.write_text("scene_final.txt", &scene_to_text(&scene))?;
    let curve: String = trace
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{i}\t{r}\n"))
        .collect();
    run.write_text("residual_trace.txt", &format!("# iter\tresidual_rms\n{curve}"))?;
    run.write_json("residual_trace.json", &TraceJson { losses: trace })?;
    Ok(())
}

fn edit_cmd(config: &RunConfig, args: &CommandArgs, run: &mut RunDir) -> Result<()> {
    let world = build_world(config, args.codec.as_deref())?;
    let (net, meta) = load_denoiser(args, run)?;
    check_denoiser_compat(&meta, config, &world)?;
    let (z_star, _) = load_embedding_file(args, run)?;
    let request = EditRequest {
        source_words: config.edit.source_words.clone(),
        target_words: config.edit.target_words.clone(),
        lambda: config.edit.lambda,
        style_words: config.edit.style_words.clone(),
        attention_factor: config.edit.attention_factor,
        seed: config.run.seed,
    };
    run.write_json("request.json", &request)?;
    let cams = world.rig.evaluation_cameras(config.generate.eval_cameras);
    let mut maps = Vec::new();
    let (images, edit) = personalize_views(
        &z_star,
        &request,
        &cams,
        &net,
        &world.schedule,
        &world.codec,
        &world.vocab,
        config.generate.sample_steps,
        Some(&mut maps),
    )?;
    run.write_png("edited_views.png", &image_row(&images))?;
    for (vi, img) in images.iter().enumerate() {
        run.write_png(&format!("views/view_{vi}.png"), img)?;
    }
    let emb_meta = EmbeddingMetadata {
        init_word: config.inversion.init_word.clone(),
        training_seed: config.run.seed,
        run_id: run.manifest().run_id.clone(),
    };
    run.write_artifact("edited_embedding.iv3d", &write_embedding(&edit.z_edit, &emb_meta))?;
    // Attention dump: one array file per (view, layer, timestep), plus index.
    let mut index = Vec::new();
    for (i, map) in maps.iter().enumerate() {
        let rel = format!(
            "attn/map_{i:05}_v{}_l{}_t{}.arr",
            map.view, map.layer, map.timestep
        );
        run.write_artifact(
            &rel,
            &super::arrayio::to_bytes(map.weights.shape(), map.weights.as_slice().unwrap()),
        )?;
        index.push(serde_json::json!({
            "file": rel,
            "view": map.view,
            "layer": map.layer,
            "timestep": map.timestep,
        }));
    }
    run.write_json("attn/index.json", &index)?;
    Ok(())
}

/// Shared-seed sweep over pseudo-token sizes.
pub fn ablate_embedding_size(
    config: &RunConfig,
    world: &World,
    net: &UNet,
    sizes: &[usize],
) -> Result<Vec<AblationRow>> {
    let target = &world.scenes[config.corpus.target_scene];
    let (eval_cams, gt_renders) = eval_renders(world, config)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut per_seed_final_loss = Vec::new();
        let mut per_seed_psnr = Vec::new();
        for s in 0..config.ablate.seeds {
            // Seeds shared across sizes so rows are comparable.
            let seed = derive_seed(config.run.seed, &format!("ablate-seed-{s}"));
            let mut inv = config.inversion.inversion_config(seed)?;
            inv.num_vectors = n;
            let (z, trace) = invert3d(
                target,
                net,
                &world.schedule,
                &world.codec,
                &world.vocab,
                &world.rig,
                &inv,
            )?;
            per_seed_final_loss.push(final_decile_mean(&trace.losses));
            let views = generate_views(
                &z,
                &eval_cams,
                net,
                &world.schedule,
                &world.codec,
                &world.vocab,
                config.generate.sample_steps,
                derive_seed(seed, "ablate-gen"),
                None,
            )?;
            let psnrs: Result<Vec<f64>> = views
                .iter()
                .zip(gt_renders.iter())
                .map(|(a, b)| psnr(a, b))
                .collect();
            per_seed_psnr.push(mean(&psnrs?));
        }
        rows.push(AblationRow {
            num_vectors: n,
            final_loss: mean(&per_seed_final_loss),
            heldout_psnr: mean(&per_seed_psnr),
            per_seed_final_loss,
            per_seed_psnr,
        });
    }
    Ok(rows)
}

fn ablate_cmd(config: &RunConfig, args: &CommandArgs, run: &mut RunDir) -> Result<()> {
    let world = build_world(config, args.codec.as_deref())?;
    let (net, meta) = load_denoiser(args, run)?;
    check_denoiser_compat(&meta, config, &world)?;
    let rows = ablate_embedding_size(config, &world, &net, &config.ablate.sizes)?;
    run.write_json("ablation.json", &rows)?;
    let mut table = String::from("# num_vectors\tfinal_loss\theldout_psnr_db\n");
    for r in &rows {
        table.push_str(&format!("{}\t{}\t{}\n", r.num_vectors, r.final_loss, r.heldout_psnr));
    }
    run.write_text("ablation.txt", &table)?;
    Ok(())
}

fn eval_cmd(_config: &RunConfig, args: &CommandArgs, run: &mut RunDir) -> Result<()> {
    let eval_dir = super::ensure(args.eval_run.clone(), "--run directory to evaluate")?;
    let evaluated = load_manifest(&eval_dir)?;
    run.record_input("evaluated_manifest", &eval_dir.join("manifest.json"))?;
    let eval_config = &evaluated.resolved_config;
    let world = build_world(eval_config, args.codec.as_deref())?;
    let mut report = MetricsReport::empty();
    match evaluated.command.as_str() {
        "invert" => {
            let denoiser_path = evaluated
                .inputs
                .get("denoiser")
                .map(|r| PathBuf::from(&r.path))
                .or_else(|| args.denoiser.clone());
            let path = super::ensure(denoiser_path, "denoiser path (manifest input or --denoiser)")?;
            let (net, _) = UNet::load_checkpoint(&path)?;
            let emb_bytes = std::fs::read(eval_dir.join("embedding.iv3d"))
                .map_err(|e| Error::Artifact(format!("embedding: {e}")))?;
            let (z, _) = read_embedding(&emb_bytes)?;
            let (eval_cams, gt) = eval_renders(&world, eval_config)?;
            let views = generate_views(
                &z,
                &eval_cams,
                &net,
                &world.schedule,
                &world.codec,
                &world.vocab,
                eval_config.generate.sample_steps,
                derive_seed(eval_config.run.seed, "eval-gen"),
                None,
            )?;
            let mut latent_mse = 0.0;
            for (a, b) in views.iter().zip(gt.iter()) {
                report.per_view_psnr.push(psnr(a, b)?);
                latent_mse += world.codec.encode(a)?.mse(&world.codec.encode(b)?)?;
            }
            report.latent_mse = Some(latent_mse / views.len() as f64);
            let trace: TraceJson = serde_json::from_slice(
                &std::fs::read(eval_dir.join("trace.json"))
                    .map_err(|e| Error::Artifact(format!("trace.json: {e}")))?,
            )?;
            report.loss_first = trace.losses.first().copied();
            report.loss_last = trace.losses.last().copied();
        }
        "reconstruct" => {
            let scene_text = std::fs::read_to_string(eval_dir.join("scene_final.txt"))
                .map_err(|e| Error::Artifact(format!("scene_final.txt: {e}")))?;
            let scene = scene_from_text(&scene_text)?;
            let (eval_cams, gt) = eval_renders(&world, eval_config)?;
            let mut latent_mse = 0.0;
            for (cam, reference) in eval_cams.iter().zip(gt.iter()) {
                let view = render(&scene, cam)?;
                report.per_view_psnr.push(psnr(&view, reference)?);
                latent_mse += world
                    .codec
                    .encode(&view)?
                    .mse(&world.codec.encode(reference)?)?;
            }
            report.latent_mse = Some(latent_mse / eval_cams.len() as f64);
            let trace: TraceJson = serde_json::from_slice(
                &std::fs::read(eval_dir.join("residual_trace.json"))
                    .map_err(|e| Error::Artifact(format!("residual_trace.json: {e}")))?,
            )?;
            report.loss_first = trace.losses.first().copied();
            report.loss_last = trace.losses.last().copied();
        }
        "ablate" => {
            let rows: Vec<AblationRow> = serde_json::from_slice(
                &std::fs::read(eval_dir.join("ablation.json"))
                    .map_err(|e| Error::Artifact(format!("ablation.json: {e}")))?,
            )?;
            report.ablation = Some(rows);
        }
        other => {
            return Err(Error::config(format!(
                "eval does not know how to score a {other:?} run"
            )))
        }
    }
    report.mean_psnr = if report.per_view_psnr.is_empty() {
        0.0
    } else {
        mean(&report.per_view_psnr)
    };
    run.write_json("metrics.json", &report)?;
    Ok(())
}

/// Content digest of an artifact on disk, re-exported for tests and the CLI.
pub fn artifact_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    let mut h = <sha2::Sha256 as sha2::Digest>::new();
    sha2::Digest::update(&mut h, &bytes);
    Ok(to_hex(&sha2::Digest::finalize(h)))
}
