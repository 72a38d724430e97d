//! Text-guided personalization: shift the inverted embedding by a semantic
//! delta, append style words to the prompt, and amplify their cross-attention
//! columns during generation or reconstruction.

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::denoiser::{AttentionControl, AttentionMap, DiffusionSchedule, UNet};
use crate::distill::{generate_views_with_prompt, reconstruct, NoisePredictor, SdsConfig};
use crate::error::{Error, Result};
use crate::renderer::Image;
use crate::scene::{Camera, CameraRig, Scene};
use crate::text_embed::{
    assemble_prompt, edit_embedding, text_delta, PromptEmbedding, PromptSlot, PseudoToken,
    Vocabulary,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditRequest {
    pub source_words: Vec<String>,
    pub target_words: Vec<String>,
    pub lambda: f64,
    /// Words appended to the prompt after the pseudo block.
    pub style_words: Vec<String>,
    /// Attention amplification factor for the style words.
    pub attention_factor: f64,
    pub seed: u64,
}

impl Default for EditRequest {
    fn default() -> Self {
        EditRequest {
            source_words: Vec::new(),
            target_words: Vec::new(),
            lambda: 1.0,
            style_words: Vec::new(),
            attention_factor: 2.0,
            seed: 0,
        }
    }
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        if self.attention_factor < 0.0 {
            return Err(Error::config("attention_factor must be >= 0"));
        }
        if self.target_words.is_empty() != self.source_words.is_empty() {
            return Err(Error::config(
                "target and source words must be given together (or both omitted)",
            ));
        }
        Ok(())
    }

    pub fn is_degenerate(&self) -> bool {
        (self.target_words.is_empty() || self.lambda == 0.0) && self.style_words.is_empty()
    }
}

/// The edited embedding, assembled prompt, and attention control implied by a
/// request.
pub struct PreparedEdit {
    pub z_edit: PseudoToken,
    pub prompt: PromptEmbedding,
    pub control: Option<AttentionControl>,
}

pub fn prepare_edit(
    z_star: &PseudoToken,
    request: &EditRequest,
    vocab: &Vocabulary,
) -> Result<PreparedEdit> {
    request.validate()?;
    let z_edit = if request.target_words.is_empty() {
        z_star.clone()
    } else {
        let delta = text_delta(&request.target_words, &request.source_words, vocab)?;
        edit_embedding(z_star, &delta, request.lambda)?
    };
    let mut template = vec![PromptSlot::Pseudo];
    for w in &request.style_words {
        template.push(PromptSlot::Word(w.clone()));
    }
    let prompt = assemble_prompt(&template, Some(&z_edit), vocab)?;
    let control = if request.style_words.is_empty() {
        None
    } else {
        let indices = prompt.word_positions(&request.style_words);
        Some(AttentionControl::new(indices, request.attention_factor))
    };
    Ok(PreparedEdit {
        z_edit,
        prompt,
        control,
    })
}

/// Apply the edit and generate one image per camera. Appends the attention
/// maps of the sampling trajectory to `maps` when a sink is given.
#[allow(clippy::too_many_arguments)]
pub fn personalize_views(
    z_star: &PseudoToken,
    request: &EditRequest,
    cameras: &[Camera],
    net: &UNet,
    schedule: &DiffusionSchedule,
    codec: &Codec,
    vocab: &Vocabulary,
    sample_steps: usize,
    maps: Option<&mut Vec<AttentionMap>>,
) -> Result<(Vec<Image>, PreparedEdit)> {
    if cameras.is_empty() {
        return Err(Error::config("personalize_views needs at least one camera"));
    }
    let edit = prepare_edit(z_star, request, vocab)?;
    let images = match maps {
        None => generate_views_with_prompt(
            &edit.prompt,
            cameras,
            net,
            schedule,
            codec,
            sample_steps,
            request.seed,
            edit.control.as_ref(),
        )?,
        Some(sink) => {
            let (h, w) = cameras[0].resolution;
            let (_, lh, lw) = codec.latent_shape_for(h, w)?;
            let cam_embs: Vec<_> = cameras.iter().map(crate::scene::camera_embedding).collect();
            let out = crate::denoiser::sample_collecting_maps(
                net,
                &edit.prompt,
                &cam_embs,
                schedule,
                sample_steps,
                request.seed,
                edit.control.as_ref(),
                (lh, lw),
                sink,
            )?;
            out.latents
                .iter()
                .map(|l| {
                    codec.decode(&crate::codec::Latent {
                        values: l.values.clone(),
                        factor: codec.downsample_factor(),
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    Ok((images, edit))
}

/// Apply the edit inside the reconstruction loop: every denoiser call during
/// score distillation sees the edited prompt and the active attention control.
#[allow(clippy::too_many_arguments)]
pub fn personalize_scene<P: NoisePredictor + ?Sized>(
    z_star: &PseudoToken,
    request: &EditRequest,
    initial: &Scene,
    sds_config: &SdsConfig,
    predictor: &P,
    schedule: &DiffusionSchedule,
    codec: &Codec,
    vocab: &Vocabulary,
    rig: &CameraRig,
) -> Result<(Scene, Vec<f64>, PreparedEdit)> {
    let edit = prepare_edit(z_star, request, vocab)?;
    let (scene, trace) = reconstruct(
        &edit.z_edit,
        initial,
        sds_config,
        predictor,
        schedule,
        codec,
        vocab,
        rig,
        edit.control.as_ref(),
        |_, _| {},
    )?;
    Ok((scene, trace, edit))
}
