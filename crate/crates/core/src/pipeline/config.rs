//! Run configuration: one TOML document covering every stage, with dotted-path
//! CLI overrides. A run manifest embeds the resolved config as JSON, and the
//! loader accepts either form so any run can be re-executed from its manifest.

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::denoiser::DenoiserConfig;
use crate::distill::WeightFn;
use crate::error::{Error, Result};
use crate::inversion::LossMode;
use crate::scene::CameraRig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub camera: CameraSection,
    #[serde(default)]
    pub codec: CodecSection,
    #[serde(default)]
    pub denoiser: DenoiserSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub vocab: VocabSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub train_codec: TrainCodecSection,
    #[serde(default)]
    pub inversion: InversionSection,
    #[serde(default)]
    pub sds: SdsSection,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub edit: EditSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSection {
    pub azimuth_range: (f64, f64),
    pub elevation_range: (f64, f64),
    pub radius: f64,
    pub fov_y_deg: f64,
    pub resolution: usize,
}

impl Default for CameraSection {
    fn default() -> Self {
        CameraSection {
            azimuth_range: (0.0, 360.0),
            elevation_range: (-30.0, 30.0),
            radius: 2.2,
            fov_y_deg: 45.0,
            resolution: 64,
        }
    }
}

impl CameraSection {
    pub fn rig(&self) -> CameraRig {
        CameraRig {
            azimuth_range: self.azimuth_range,
            elevation_range: self.elevation_range,
            radius: self.radius,
            look_at: [0.0; 3],
            fov_y_deg: self.fov_y_deg,
            resolution: (self.resolution, self.resolution),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSection {
    pub mode: String,
    pub patch_size: usize,
    pub latent_channels: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            mode: "orthonormal".into(),
            patch_size: 8,
            latent_channels: 4,
        }
    }
}

impl CodecSection {
    pub fn codec_config(&self) -> Result<CodecConfig> {
        let mode = match self.mode.as_str() {
            "orthonormal" => crate::codec::CodecMode::Orthonormal,
            "learned" => crate::codec::CodecMode::Learned,
            other => return Err(Error::config(format!("unknown codec mode {other:?}"))),
        };
        Ok(CodecConfig {
            mode,
            patch_size: self.patch_size,
            latent_channels: self.latent_channels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    pub base_channels: usize,
    pub attention_heads: usize,
    pub text_dim: usize,
    pub views_per_step: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        DenoiserSection {
            base_channels: 32,
            attention_heads: 2,
            text_dim: 64,
            views_per_step: 4,
            time_embed_dim: 64,
        }
    }
}

impl DenoiserSection {
    pub fn denoiser_config(&self, latent_channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: self.base_channels,
            attention_heads: self.attention_heads,
            text_dim: self.text_dim,
            camera_dim: 16,
            latent_channels,
            views_per_step: self.views_per_step,
            time_embed_dim: self.time_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub beta_start: f64,
    pub beta_end: f64,
    pub timesteps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            beta_start: 0.00085,
            beta_end: 0.012,
            timesteps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSection {
    pub seed: u64,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection { seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// One caption per scene; scene i draws from palette i.
    pub captions: Vec<Vec<String>>,
    pub palettes: Vec<Vec<[f64; 3]>>,
    pub splats_per_scene: usize,
    pub extent: f64,
    pub background: [f64; 3],
    pub seed: u64,
    /// Index of the scene the inversion stages target.
    pub target_scene: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            captions: vec![
                vec!["red".into(), "blob".into()],
                vec!["blue".into(), "blob".into()],
                vec!["yellow".into(), "cluster".into()],
                vec!["green".into(), "sphere".into()],
                vec!["purple".into(), "cube".into()],
                vec!["orange".into(), "cluster".into()],
                vec!["white".into(), "sphere".into()],
                vec!["dark".into(), "cube".into()],
            ],
            palettes: vec![
                vec![[0.92, 0.12, 0.10], [0.80, 0.25, 0.18], [0.98, 0.35, 0.30]],
                vec![[0.10, 0.25, 0.92], [0.18, 0.40, 0.80], [0.30, 0.55, 0.98]],
                vec![[0.95, 0.85, 0.10], [0.90, 0.70, 0.15], [0.99, 0.92, 0.35]],
                vec![[0.12, 0.80, 0.25], [0.20, 0.65, 0.30], [0.35, 0.92, 0.45]],
                vec![[0.60, 0.15, 0.85], [0.48, 0.22, 0.70], [0.75, 0.35, 0.95]],
                vec![[0.95, 0.55, 0.10], [0.88, 0.45, 0.12], [0.99, 0.68, 0.25]],
                vec![[0.92, 0.92, 0.92], [0.80, 0.82, 0.85], [0.97, 0.95, 0.92]],
                vec![[0.22, 0.20, 0.25], [0.30, 0.28, 0.33], [0.15, 0.15, 0.18]],
            ],
            splats_per_scene: 40,
            extent: 0.85,
            background: [0.05, 0.05, 0.08],
            seed: 11,
            target_scene: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub views_per_scene_pool: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 3000,
            learning_rate: 5e-3,
            views_per_scene_pool: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCodecSection {
    pub epochs: usize,
    pub images_per_scene: usize,
}

impl Default for TrainCodecSection {
    fn default() -> Self {
        TrainCodecSection {
            epochs: 40,
            images_per_scene: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub views_per_iteration: usize,
    pub loss_mode: String,
    pub num_vectors: usize,
    pub init_word: String,
    pub camera_conditioning: bool,
}

impl Default for InversionSection {
    fn default() -> Self {
        InversionSection {
            steps: 600,
            learning_rate: 5e-3,
            views_per_iteration: 4,
            loss_mode: "epsilon_prediction".into(),
            num_vectors: 32,
            init_word: "object".into(),
            camera_conditioning: true,
        }
    }
}

impl InversionSection {
    pub fn inversion_config(&self, seed: u64) -> Result<crate::inversion::InversionConfig> {
        let loss_mode = match self.loss_mode.as_str() {
            "epsilon_prediction" => LossMode::EpsilonPrediction,
            "latent_reconstruction" => LossMode::LatentReconstruction,
            other => return Err(Error::config(format!("unknown loss mode {other:?}"))),
        };
        Ok(crate::inversion::InversionConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            views_per_iteration: self.views_per_iteration,
            loss_mode,
            seed,
            num_vectors: self.num_vectors,
            init_word: self.init_word.clone(),
            camera_conditioning: self.camera_conditioning,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdsSection {
    pub iterations: usize,
    pub scene_learning_rate: f64,
    pub weight_fn: String,
    pub t_min: usize,
    pub t_max: usize,
    pub init_splats: usize,
    pub turnaround_every: usize,
}

impl Default for SdsSection {
    fn default() -> Self {
        SdsSection {
            iterations: 300,
            scene_learning_rate: 0.003,
            weight_fn: "one_minus_alpha_bar".into(),
            t_min: 0,
            t_max: 0,
            init_splats: 64,
            turnaround_every: 50,
        }
    }
}

impl SdsSection {
    pub fn sds_config(&self, seed: u64) -> Result<crate::distill::SdsConfig> {
        let weight_fn = match self.weight_fn.as_str() {
            "constant" => WeightFn::Constant,
            "one_minus_alpha_bar" => WeightFn::OneMinusAlphaBar,
            other => return Err(Error::config(format!("unknown weight fn {other:?}"))),
        };
        Ok(crate::distill::SdsConfig {
            iterations: self.iterations,
            scene_learning_rate: self.scene_learning_rate,
            timestep_range: (self.t_min, self.t_max),
            weight_fn,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub sample_steps: usize,
    pub eval_cameras: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            sample_steps: 40,
            eval_cameras: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSection {
    pub source_words: Vec<String>,
    pub target_words: Vec<String>,
    pub lambda: f64,
    pub style_words: Vec<String>,
    pub attention_factor: f64,
}

impl Default for EditSection {
    fn default() -> Self {
        EditSection {
            source_words: Vec::new(),
            target_words: Vec::new(),
            lambda: 1.0,
            style_words: vec!["neon".into()],
            attention_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub sizes: Vec<usize>,
    pub seeds: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            sizes: vec![1, 4, 32],
            seeds: 3,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: Default::default(),
            camera: Default::default(),
            codec: Default::default(),
            denoiser: Default::default(),
            schedule: Default::default(),
            vocab: Default::default(),
            corpus: Default::default(),
            train: Default::default(),
            train_codec: Default::default(),
            inversion: Default::default(),
            sds: Default::default(),
            generate: Default::default(),
            edit: Default::default(),
            ablate: Default::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.corpus.captions.is_empty() || self.corpus.captions.len() != self.corpus.palettes.len()
        {
            return Err(Error::config(
                "corpus needs matching non-empty captions and palettes",
            ));
        }
        if self.corpus.target_scene >= self.corpus.captions.len() {
            return Err(Error::config("corpus.target_scene out of range"));
        }
        self.codec.codec_config()?.validate()?;
        let rig = self.camera.rig();
        rig.validate()?;
        let codec_cfg = self.codec.codec_config()?;
        if self.camera.resolution % codec_cfg.downsample_factor() != 0 {
            return Err(Error::config(
                "camera resolution must be divisible by the codec factor",
            ));
        }
        Ok(())
    }
}

/// Parse a config from TOML text, or from a run-manifest JSON document (the
/// loader recognizes the embedded `resolved_config`).
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let config_value = value
            .get("resolved_config")
            .cloned()
            .unwrap_or(value);
        let config: RunConfig = serde_json::from_value(config_value)?;
        config.validate()?;
        return Ok(config);
    }
    let config: RunConfig =
        toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Artifact(format!("config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Apply `key=value` overrides with dotted paths, e.g.
/// `inversion.steps=100` or `edit.style_words=["neon","sketch"]`.
pub fn apply_overrides(config: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    if overrides.is_empty() {
        return Ok(config.clone());
    }
    let mut value: toml::Value =
        toml::Value::try_from(config).map_err(|e| Error::config(format!("config to toml: {e}")))?;
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {item:?} is not key=value")))?;
        let parsed: toml::Value = parse_override_value(raw.trim());
        let segments: Vec<&str> = path.trim().split('.').collect();
        let (last, ancestors) = segments
            .split_last()
            .ok_or_else(|| Error::config(format!("empty override path in {item:?}")))?;
        let mut cursor = &mut value;
        for seg in ancestors {
            cursor = cursor
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("override path {path:?} hits a non-table")))?
                .get_mut(*seg)
                .ok_or_else(|| Error::config(format!("unknown config section {seg:?}")))?;
        }
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path {path:?} hits a non-table")))?;
        if !table.contains_key(*last) {
            return Err(Error::config(format!("unknown config key {path:?}")));
        }
        table.insert(last.to_string(), parsed);
    }
    let updated: RunConfig = value
        .try_into()
        .map_err(|e| Error::config(format!("override produced invalid config: {e}")))?;
    updated.validate()?;
    Ok(updated)
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Try full TOML value syntax first (arrays, quoted strings), then scalars.
    if let Ok(wrapped) = toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        if let Some(v) = wrapped.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}
