//! Camera- and text-conditioned U-shaped noise predictor with hand-written
//! backward passes. Two resolution levels, cross-attention from latent tokens
//! to the prompt sequence at each level, camera pose injected additively into
//! the timestep conditioning.

use ndarray::{concatenate, s, Array1, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::Latent;
use crate::error::{Error, Result};
use crate::nn::conv::{upsample2, upsample2_backward, ConvCache};
use crate::nn::linear::LinearCache;
use crate::nn::norm::GroupNormCache;
use crate::nn::{
    add_scaled, silu, silu_grad, sinusoidal_embedding, zeroed_clone, ColumnReweight, Conv2d,
    CrossAttention, GroupNorm, HasParams, Linear,
};
use crate::rng::derive_rng;
use crate::scene::CameraEmbedding;
use crate::text_embed::PromptEmbedding;

use super::{AttentionControl, AttentionMap, DenoiserConfig};

const SINUSOID_DIM: usize = 32;
const GN_GROUPS: usize = 8;
/// Scale of the positional code added to prompt tokens before the K/V
/// projections. Without it a pseudo-token block initialized to identical
/// rows would receive identical gradients forever.
const PROMPT_POS_SCALE: f64 = 0.25;

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache {
    gn1c: GroupNormCache,
    pre1: Array3<f64>,
    conv1c: ConvCache,
    tpc: LinearCache,
    gn2c: GroupNormCache,
    pre2: Array3<f64>,
    conv2c: ConvCache,
    skipc: Option<ConvCache>,
}

impl ResBlock {
    fn init(c_in: usize, c_out: usize, time_dim: usize, rng: &mut rand_chacha::ChaCha12Rng) -> Self {
        ResBlock {
            gn1: GroupNorm::init(c_in, GN_GROUPS),
            conv1: Conv2d::init(c_in, c_out, 3, 1, rng),
            time_proj: Linear::init(time_dim, c_out, rng),
            gn2: GroupNorm::init(c_out, GN_GROUPS),
            conv2: Conv2d::init(c_out, c_out, 3, 1, rng),
            skip: (c_in != c_out).then(|| Conv2d::init(c_in, c_out, 1, 1, rng)),
        }
    }

    fn forward(&self, x: &Array3<f64>, st: &Array1<f64>) -> (Array3<f64>, ResCache) {
        let (n1, gn1c) = self.gn1.forward(x);
        let a1 = n1.mapv(silu);
        let (h1, conv1c) = self.conv1.forward(&a1);
        let (tp, tpc) = self.time_proj.forward_vec(st);
        let mut h1t = h1;
        for (c, mut plane) in h1t.outer_iter_mut().enumerate() {
            plane += tp[c];
        }
        let (n2, gn2c) = self.gn2.forward(&h1t);
        let a2 = n2.mapv(silu);
        let (h2, conv2c) = self.conv2.forward(&a2);
        let (skipped, skipc) = match &self.skip {
            Some(conv) => {
                let (y, c) = conv.forward(x);
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        (
            h2 + skipped,
            ResCache {
                gn1c,
                pre1: n1,
                conv1c,
                tpc,
                gn2c,
                pre2: n2,
                conv2c,
                skipc,
            },
        )
    }

    /// Returns (g_x, g_st, grads).
    fn backward(&self, cache: &ResCache, g_y: &Array3<f64>) -> (Array3<f64>, Array1<f64>, ResBlock) {
        let (mut g_a2, gw2, gb2) = self.conv2.backward(&cache.conv2c, g_y);
        g_a2.zip_mut_with(&cache.pre2, |g, p| *g *= silu_grad(*p));
        let (g_h1t, g_gamma2, g_beta2) = self.gn2.backward(&cache.gn2c, &g_a2);
        let g_tp = g_h1t.sum_axis(Axis(2)).sum_axis(Axis(1));
        let (g_st, gtw, gtb) = self.time_proj.backward_vec(&cache.tpc, &g_tp);
        let (mut g_a1, gw1, gb1) = self.conv1.backward(&cache.conv1c, &g_h1t);
        g_a1.zip_mut_with(&cache.pre1, |g, p| *g *= silu_grad(*p));
        let (g_x1, g_gamma1, g_beta1) = self.gn1.backward(&cache.gn1c, &g_a1);
        let (g_x, g_skip) = match (&self.skip, &cache.skipc) {
            (Some(conv), Some(sc)) => {
                let (gx, gsw, gsb) = conv.backward(sc, g_y);
                (
                    g_x1 + gx,
                    Some(Conv2d {
                        weight: gsw,
                        bias: gsb,
                        stride: conv.stride,
                    }),
                )
            }
            _ => (g_x1 + g_y, None),
        };
        let grads = ResBlock {
            gn1: GroupNorm {
                groups: self.gn1.groups,
                gamma: g_gamma1,
                beta: g_beta1,
                eps: self.gn1.eps,
            },
            conv1: Conv2d {
                weight: gw1,
                bias: gb1,
                stride: 1,
            },
            time_proj: Linear {
                weight: gtw,
                bias: gtb,
            },
            gn2: GroupNorm {
                groups: self.gn2.groups,
                gamma: g_gamma2,
                beta: g_beta2,
                eps: self.gn2.eps,
            },
            conv2: Conv2d {
                weight: gw2,
                bias: gb2,
                stride: 1,
            },
            skip: g_skip,
        };
        (g_x, g_st, grads)
    }
}

impl HasParams for ResBlock {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.gn1.params();
        p.extend(self.conv1.params());
        p.extend(self.time_proj.params());
        p.extend(self.gn2.params());
        p.extend(self.conv2.params());
        if let Some(skip) = &self.skip {
            p.extend(skip.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.gn1.params_mut();
        p.extend(self.conv1.params_mut());
        p.extend(self.time_proj.params_mut());
        p.extend(self.gn2.params_mut());
        p.extend(self.conv2.params_mut());
        if let Some(skip) = &mut self.skip {
            p.extend(skip.params_mut());
        }
        p
    }
}

// ---------------------------------------------------------------------------
// Attention block: norm -> cross attention -> residual
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct AttnBlock {
    gn: GroupNorm,
    attn: CrossAttention,
}

struct AttnBlockCache {
    gnc: GroupNormCache,
    attnc: crate::nn::attn::AttnCache,
    hw: (usize, usize),
}

fn to_tokens(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array2::zeros((h * w, c));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(i * w + j, ci)] = x[(ci, i, j)];
            }
        }
    }
    out
}

fn from_tokens(t: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = t.shape()[1];
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ci, i, j)] = t[(i * w + j, ci)];
            }
        }
    }
    out
}

impl AttnBlock {
    fn init(
        channels: usize,
        ctx_dim: usize,
        heads: usize,
        rng: &mut rand_chacha::ChaCha12Rng,
    ) -> Self {
        AttnBlock {
            gn: GroupNorm::init(channels, GN_GROUPS),
            attn: CrossAttention::init(channels, ctx_dim, heads, rng),
        }
    }

    fn forward(
        &self,
        x: &Array3<f64>,
        prompt: &Array2<f64>,
        rw: Option<&ColumnReweight>,
    ) -> (Array3<f64>, Array2<f64>, AttnBlockCache) {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (n, gnc) = self.gn.forward(x);
        let tokens = to_tokens(&n);
        let (a, map, attnc) = self.attn.forward(&tokens, prompt, rw);
        let y = x + &from_tokens(&a, h, w);
        (y, map, AttnBlockCache { gnc, attnc, hw: (h, w) })
    }

    /// Returns (g_x, g_prompt, grads).
    fn backward(
        &self,
        cache: &AttnBlockCache,
        g_y: &Array3<f64>,
    ) -> (Array3<f64>, Array2<f64>, AttnBlock) {
        let (h, w) = cache.hw;
        let g_a = to_tokens(g_y);
        let (g_tokens, g_prompt, attn_grads) = self.attn.backward(&cache.attnc, &g_a);
        let g_n = from_tokens(&g_tokens, h, w);
        let (g_x1, gg, gb) = self.gn.backward(&cache.gnc, &g_n);
        let grads = AttnBlock {
            gn: GroupNorm {
                groups: self.gn.groups,
                gamma: gg,
                beta: gb,
                eps: self.gn.eps,
            },
            attn: attn_grads,
        };
        (g_x1 + g_y, g_prompt, grads)
    }
}

impl HasParams for AttnBlock {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.gn.params();
        p.extend(self.attn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.gn.params_mut();
        p.extend(self.attn.params_mut());
        p
    }
}

// ---------------------------------------------------------------------------
// The U-Net
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct UNet {
    pub config: DenoiserConfig,
    pub trained: bool,
    pub init_seed: u64,
    time_lin1: Linear,
    time_lin2: Linear,
    cam_lin: Linear,
    conv_in: Conv2d,
    rb1: ResBlock,
    at1: AttnBlock,
    down: Conv2d,
    rb2: ResBlock,
    at2: AttnBlock,
    rb3: ResBlock,
    up: Conv2d,
    rb4: ResBlock,
    at3: AttnBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    /// Timestep-conditioned per-channel gain on the direct input path. The
    /// identity-like component of the noise estimate rides on x_t itself
    /// instead of squeezing through the feature trunk.
    skip_gain: Linear,
}

pub struct ViewCache {
    t1_pre: Array1<f64>,
    t1c: LinearCache,
    t2c: LinearCache,
    camc: LinearCache,
    cond: Array1<f64>,
    conv_inc: ConvCache,
    rb1c: ResCache,
    at1c: AttnBlockCache,
    downc: ConvCache,
    rb2c: ResCache,
    at2c: AttnBlockCache,
    rb3c: ResCache,
    upc: ConvCache,
    rb4c: ResCache,
    at3c: AttnBlockCache,
    gnoutc: GroupNormCache,
    nout_pre: Array3<f64>,
    conv_outc: ConvCache,
    gainc: LinearCache,
    gain: Array1<f64>,
    input: Array3<f64>,
}

/// Per-call result of the noise predictor.
pub struct PredictOutput {
    pub eps_hat: Vec<Latent>,
    pub maps: Vec<AttentionMap>,
}

/// Gradients produced by the backward pass.
pub struct BackwardOutput {
    /// Gradient with respect to the prompt vectors, summed over views.
    pub g_prompt: Array2<f64>,
    /// Gradient with respect to each view's input latent.
    pub g_inputs: Vec<Array3<f64>>,
    /// Parameter gradients, summed over views.
    pub grads: Box<UNet>,
}

impl UNet {
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<UNet> {
        config.validate()?;
        let mut rng = derive_rng(seed, "unet-init");
        let c = config.base_channels;
        let c2 = 2 * c;
        let td = config.time_embed_dim;
        let heads = config.attention_heads;
        let text = config.text_dim;
        let mut conv_out = Conv2d::init(c, config.latent_channels, 3, 1, &mut rng);
        // Zero-init the output heads so the untrained net predicts zero noise.
        conv_out.weight.fill(0.0);
        conv_out.bias.fill(0.0);
        let mut skip_gain = Linear::init(td, config.latent_channels, &mut rng);
        skip_gain.weight.fill(0.0);
        skip_gain.bias.fill(0.0);
        Ok(UNet {
            config: config.clone(),
            trained: false,
            init_seed: seed,
            time_lin1: Linear::init(SINUSOID_DIM, td, &mut rng),
            time_lin2: Linear::init(td, td, &mut rng),
            cam_lin: Linear::init(config.camera_dim, td, &mut rng),
            conv_in: Conv2d::init(config.latent_channels, c, 3, 1, &mut rng),
            rb1: ResBlock::init(c, c, td, &mut rng),
            at1: AttnBlock::init(c, text, heads, &mut rng),
            down: Conv2d::init(c, c2, 3, 2, &mut rng),
            rb2: ResBlock::init(c2, c2, td, &mut rng),
            at2: AttnBlock::init(c2, text, heads, &mut rng),
            rb3: ResBlock::init(c2, c2, td, &mut rng),
            up: Conv2d::init(c2, c, 3, 1, &mut rng),
            rb4: ResBlock::init(c2, c, td, &mut rng),
            at3: AttnBlock::init(c, text, heads, &mut rng),
            norm_out: GroupNorm::init(c, GN_GROUPS),
            conv_out,
            skip_gain,
        })
    }

    fn check_inputs(
        &self,
        x_t: &[Latent],
        t: usize,
        prompt: &PromptEmbedding,
        cams: &[CameraEmbedding],
        control: Option<&AttentionControl>,
    ) -> Result<()> {
        if x_t.is_empty() {
            return Err(Error::config("predict_noise needs at least one view"));
        }
        if x_t.len() != cams.len() {
            return Err(Error::shape(format!(
                "{} latents vs {} camera embeddings",
                x_t.len(),
                cams.len()
            )));
        }
        if t == 0 {
            return Err(Error::config("timestep must be >= 1"));
        }
        let shape0 = x_t[0].values.shape();
        if shape0[0] != self.config.latent_channels {
            return Err(Error::shape(format!(
                "latent has {} channels, model expects {}",
                shape0[0], self.config.latent_channels
            )));
        }
        if shape0[1] % 2 != 0 || shape0[2] % 2 != 0 {
            return Err(Error::shape("latent spatial dims must be even".to_string()));
        }
        for l in x_t {
            if l.values.shape() != shape0 {
                return Err(Error::shape("latent shapes differ across views".to_string()));
            }
        }
        if prompt.vectors.shape()[1] != self.config.text_dim {
            return Err(Error::shape(format!(
                "prompt dim {} vs model text_dim {}",
                prompt.vectors.shape()[1],
                self.config.text_dim
            )));
        }
        if let Some(ctrl) = control {
            ctrl.validate(prompt.len())?;
        }
        Ok(())
    }

    fn forward_view(
        &self,
        x: &Array3<f64>,
        t: usize,
        prompt: &Array2<f64>,
        cam: &CameraEmbedding,
        rw: Option<&ColumnReweight>,
    ) -> (Array3<f64>, Vec<Array2<f64>>, ViewCache) {
        let sin = sinusoidal_embedding(t as f64, SINUSOID_DIM);
        let (t1, t1c) = self.time_lin1.forward_vec(&sin);
        let t1s = t1.mapv(silu);
        let (t2, t2c) = self.time_lin2.forward_vec(&t1s);
        let (cv, camc) = self.cam_lin.forward_vec(&Array1::from(cam.values.to_vec()));
        let cond = t2 + cv;
        let st = cond.mapv(silu);

        let (h0, conv_inc) = self.conv_in.forward(x);
        let (h1, rb1c) = self.rb1.forward(&h0, &st);
        let (h1b, map1, at1c) = self.at1.forward(&h1, prompt, rw);
        let (d, downc) = self.down.forward(&h1b);
        let (h2, rb2c) = self.rb2.forward(&d, &st);
        let (h2b, map2, at2c) = self.at2.forward(&h2, prompt, rw);
        let (h3, rb3c) = self.rb3.forward(&h2b, &st);
        let u0 = upsample2(&h3);
        let (u, upc) = self.up.forward(&u0);
        let cat = concatenate(Axis(0), &[u.view(), h1b.view()]).unwrap();
        let (h4, rb4c) = self.rb4.forward(&cat, &st);
        let (h4b, map3, at3c) = self.at3.forward(&h4, prompt, rw);
        let (n, gnoutc) = self.norm_out.forward(&h4b);
        let a = n.mapv(silu);
        let (mut out, conv_outc) = self.conv_out.forward(&a);
        let (gain, gainc) = self.skip_gain.forward_vec(&st);
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            plane.zip_mut_with(&x.index_axis(ndarray::Axis(0), c), |o, xv| {
                *o += gain[c] * xv;
            });
        }

        (
            out,
            vec![map1, map2, map3],
            ViewCache {
                t1_pre: t1,
                t1c,
                t2c,
                camc,
                cond,
                conv_inc,
                rb1c,
                at1c,
                downc,
                rb2c,
                at2c,
                rb3c,
                upc,
                rb4c,
                at3c,
                gnoutc,
                nout_pre: n,
                conv_outc,
                gainc,
                gain,
                input: x.clone(),
            },
        )
    }

    fn backward_view(
        &self,
        cache: &ViewCache,
        g_out: &Array3<f64>,
    ) -> (Array3<f64>, Array2<f64>, UNet) {
        let c = self.config.base_channels;
        // Direct-path gradients: per-channel gain and the input itself.
        let mut g_gain = Array1::zeros(self.config.latent_channels);
        for (ci, plane) in g_out.outer_iter().enumerate() {
            let x_plane = cache.input.index_axis(ndarray::Axis(0), ci);
            g_gain[ci] = plane.iter().zip(x_plane.iter()).map(|(g, xv)| g * xv).sum();
        }
        let (g_st_gain, gw_gain, gb_gain) = self.skip_gain.backward_vec(&cache.gainc, &g_gain);
        let (mut g_a, gw_out, gb_out) = self.conv_out.backward(&cache.conv_outc, g_out);
        g_a.zip_mut_with(&cache.nout_pre, |g, p| *g *= silu_grad(*p));
        let (g_h4b, gg_out, gbeta_out) = self.norm_out.backward(&cache.gnoutc, &g_a);
        let (g_h4, g_prompt3, at3g) = self.at3.backward(&cache.at3c, &g_h4b);
        let (g_cat, g_st4, rb4g) = self.rb4.backward(&cache.rb4c, &g_h4);
        let g_u = g_cat.slice(s![0..c, .., ..]).into_owned();
        let g_h1b_skip = g_cat.slice(s![c.., .., ..]).into_owned();
        let (g_u0, gw_up, gb_up) = self.up.backward(&cache.upc, &g_u);
        let g_h3 = upsample2_backward(&g_u0);
        let (g_h2b, g_st3, rb3g) = self.rb3.backward(&cache.rb3c, &g_h3);
        let (g_h2, g_prompt2, at2g) = self.at2.backward(&cache.at2c, &g_h2b);
        let (g_d, g_st2, rb2g) = self.rb2.backward(&cache.rb2c, &g_h2);
        let (g_h1b_down, gw_down, gb_down) = self.down.backward(&cache.downc, &g_d);
        let g_h1b = g_h1b_down + g_h1b_skip;
        let (g_h1, g_prompt1, at1g) = self.at1.backward(&cache.at1c, &g_h1b);
        let (g_h0, g_st1, rb1g) = self.rb1.backward(&cache.rb1c, &g_h1);
        let (mut g_x, gw_in, gb_in) = self.conv_in.backward(&cache.conv_inc, &g_h0);
        for (ci, mut plane) in g_x.outer_iter_mut().enumerate() {
            plane.zip_mut_with(&g_out.index_axis(ndarray::Axis(0), ci), |gx, go| {
                *gx += cache.gain[ci] * go;
            });
        }

        let g_st = g_st1 + g_st2 + g_st3 + g_st4 + g_st_gain;
        let mut g_cond = g_st;
        g_cond.zip_mut_with(&cache.cond, |g, p| *g *= silu_grad(*p));
        let (g_t1s, gw_t2, gb_t2) = self.time_lin2.backward_vec(&cache.t2c, &g_cond);
        let mut g_t1 = g_t1s;
        g_t1.zip_mut_with(&cache.t1_pre, |g, p| *g *= silu_grad(*p));
        let (_, gw_t1, gb_t1) = self.time_lin1.backward_vec(&cache.t1c, &g_t1);
        let (_, gw_cam, gb_cam) = self.cam_lin.backward_vec(&cache.camc, &g_cond);

        let g_prompt = g_prompt1 + g_prompt2 + g_prompt3;
        let grads = UNet {
            config: self.config.clone(),
            trained: self.trained,
            init_seed: self.init_seed,
            time_lin1: Linear { weight: gw_t1, bias: gb_t1 },
            time_lin2: Linear { weight: gw_t2, bias: gb_t2 },
            cam_lin: Linear { weight: gw_cam, bias: gb_cam },
            conv_in: Conv2d { weight: gw_in, bias: gb_in, stride: 1 },
            rb1: rb1g,
            at1: at1g,
            down: Conv2d { weight: gw_down, bias: gb_down, stride: 2 },
            rb2: rb2g,
            at2: at2g,
            rb3: rb3g,
            up: Conv2d { weight: gw_up, bias: gb_up, stride: 1 },
            rb4: rb4g,
            at3: at3g,
            norm_out: GroupNorm {
                groups: self.norm_out.groups,
                gamma: gg_out,
                beta: gbeta_out,
                eps: self.norm_out.eps,
            },
            conv_out: Conv2d { weight: gw_out, bias: gb_out, stride: 1 },
            skip_gain: Linear { weight: gw_gain, bias: gb_gain },
        };
        (g_x, g_prompt, grads)
    }

    /// Prompt tokens with the positional code applied; what the attention
    /// layers actually see as context.
    fn prompt_context(&self, prompt: &PromptEmbedding) -> Array2<f64> {
        let (len, dim) = (prompt.vectors.shape()[0], prompt.vectors.shape()[1]);
        let mut ctx = prompt.vectors.clone();
        for i in 0..len {
            let code = sinusoidal_embedding(i as f64, dim);
            for j in 0..dim {
                ctx[(i, j)] += PROMPT_POS_SCALE * code[j];
            }
        }
        ctx
    }

    /// Forward pass over a view group, returning per-view caches for backward.
    pub fn forward_views(
        &self,
        x_t: &[Latent],
        t: usize,
        prompt: &PromptEmbedding,
        cams: &[CameraEmbedding],
        control: Option<&AttentionControl>,
    ) -> Result<(PredictOutput, Vec<ViewCache>)> {
        self.check_inputs(x_t, t, prompt, cams, control)?;
        let rw = control.and_then(|c| c.reweight());
        let ctx = self.prompt_context(prompt);
        let per_view: Vec<(Array3<f64>, Vec<Array2<f64>>, ViewCache)> = x_t
            .par_iter()
            .zip(cams.par_iter())
            .map(|(x, cam)| self.forward_view(&x.values, t, &ctx, cam, rw.as_ref()))
            .collect();
        let mut eps_hat = Vec::with_capacity(x_t.len());
        let mut maps = Vec::new();
        let mut caches = Vec::with_capacity(x_t.len());
        for (view, (out, view_maps, cache)) in per_view.into_iter().enumerate() {
            eps_hat.push(Latent {
                values: out,
                factor: x_t[view].factor,
            });
            for (layer, weights) in view_maps.into_iter().enumerate() {
                maps.push(AttentionMap {
                    layer,
                    view,
                    timestep: t,
                    weights,
                });
            }
            caches.push(cache);
        }
        Ok((PredictOutput { eps_hat, maps }, caches))
    }

    /// Noise prediction with cross-attention maps, no gradient bookkeeping.
    pub fn predict_noise(
        &self,
        x_t: &[Latent],
        t: usize,
        prompt: &PromptEmbedding,
        cams: &[CameraEmbedding],
        control: Option<&AttentionControl>,
    ) -> Result<PredictOutput> {
        Ok(self.forward_views(x_t, t, prompt, cams, control)?.0)
    }

    /// Backward over a view group given upstream gradients on eps_hat.
    pub fn backward_views(
        &self,
        caches: &[ViewCache],
        upstream: &[Latent],
    ) -> Result<BackwardOutput> {
        if caches.len() != upstream.len() {
            return Err(Error::shape("caches vs upstream count".to_string()));
        }
        let per_view: Vec<(Array3<f64>, Array2<f64>, UNet)> = caches
            .par_iter()
            .zip(upstream.par_iter())
            .map(|(cache, g)| self.backward_view(cache, &g.values))
            .collect();
        let mut grads = Box::new(zeroed_clone(self));
        let mut g_prompt: Option<Array2<f64>> = None;
        let mut g_inputs = Vec::with_capacity(per_view.len());
        for (g_x, g_p, g_w) in per_view {
            add_scaled(grads.as_mut(), &g_w, 1.0);
            g_prompt = Some(match g_prompt {
                None => g_p,
                Some(acc) => acc + g_p,
            });
            g_inputs.push(g_x);
        }
        Ok(BackwardOutput {
            g_prompt: g_prompt.unwrap(),
            g_inputs,
            grads,
        })
    }

    pub fn parameter_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for s in self.params() {
            for v in s {
                h.update(v.to_le_bytes());
            }
        }
        crate::rng::to_hex(&h.finalize())
    }
}

impl HasParams for UNet {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.time_lin1.params();
        p.extend(self.time_lin2.params());
        p.extend(self.cam_lin.params());
        p.extend(self.conv_in.params());
        p.extend(self.rb1.params());
        p.extend(self.at1.params());
        p.extend(self.down.params());
        p.extend(self.rb2.params());
        p.extend(self.at2.params());
        p.extend(self.rb3.params());
        p.extend(self.up.params());
        p.extend(self.rb4.params());
        p.extend(self.at3.params());
        p.extend(self.norm_out.params());
        p.extend(self.conv_out.params());
        p.extend(self.skip_gain.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.time_lin1.params_mut();
        p.extend(self.time_lin2.params_mut());
        p.extend(self.cam_lin.params_mut());
        p.extend(self.conv_in.params_mut());
        p.extend(self.rb1.params_mut());
        p.extend(self.at1.params_mut());
        p.extend(self.down.params_mut());
        p.extend(self.rb2.params_mut());
        p.extend(self.at2.params_mut());
        p.extend(self.rb3.params_mut());
        p.extend(self.up.params_mut());
        p.extend(self.rb4.params_mut());
        p.extend(self.at3.params_mut());
        p.extend(self.norm_out.params_mut());
        p.extend(self.conv_out.params_mut());
        p.extend(self.skip_gain.params_mut());
        p
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: DenoiserConfig,
    pub beta_start: f64,
    pub beta_end: f64,
    pub timesteps: usize,
    pub training_seed: u64,
    pub corpus_hash: String,
    pub trained: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    meta: CheckpointMeta,
    tensors: Vec<crate::nn::params_io::TensorRecord>,
}

impl UNet {
    pub fn to_checkpoint_bytes(&self, meta: &CheckpointMeta) -> Vec<u8> {
        let file = CheckpointFile {
            meta: meta.clone(),
            tensors: crate::nn::params_io::encode_params(self),
        };
        serde_json::to_vec(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(UNet, CheckpointMeta)> {
        let file: CheckpointFile = serde_json::from_slice(bytes)?;
        let mut net = UNet::init(&file.meta.config, 0)?;
        crate::nn::params_io::decode_params(&mut net, &file.tensors)?;
        net.trained = file.meta.trained;
        Ok((net, file.meta))
    }

    pub fn save_checkpoint(&self, path: &std::path::Path, meta: &CheckpointMeta) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes(meta))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<(UNet, CheckpointMeta)> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Artifact(format!("checkpoint {}: {e}", path.display())))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 8,
            attention_heads: 2,
            text_dim: 12,
            latent_channels: 6,
            views_per_step: 2,
            time_embed_dim: 16,
            ..DenoiserConfig::default()
        }
    }

    fn toy_prompt(len: usize, dim: usize, seed: u64) -> PromptEmbedding {
        let mut rng = derive_rng(seed, "toy-prompt");
        PromptEmbedding {
            vectors: Array2::from_shape_fn((len, dim), |_| rng.random_range(-1.0..1.0)),
            token_labels: (0..len).map(|i| format!("w{i}")).collect(),
        }
    }

    fn toy_latent(cfg: &DenoiserConfig, seed: u64) -> Latent {
        let mut rng = derive_rng(seed, "toy-latent");
        Latent {
            values: Array3::from_shape_fn((cfg.latent_channels, 4, 4), |_| {
                rng.random_range(-1.0..1.0)
            }),
            factor: 8,
        }
    }

    fn randomized_net(cfg: &DenoiserConfig, seed: u64) -> UNet {
        let mut net = UNet::init(cfg, seed).unwrap();
        // Give the zero-initialized output conv some signal for gradient tests.
        let mut rng = derive_rng(seed, "randomize-out");
        for s in net.conv_out.params_mut() {
            for v in s {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        net
    }

    #[test]
    fn untrained_net_predicts_zero_noise() {
        let cfg = small_config();
        let net = UNet::init(&cfg, 1).unwrap();
        let x = toy_latent(&cfg, 2);
        let prompt = toy_prompt(3, cfg.text_dim, 3);
        let cam = crate::scene::CameraEmbedding::identity();
        let out = net
            .predict_noise(&[x], 10, &prompt, &[cam], None)
            .unwrap();
        assert!(out.eps_hat[0].values.iter().all(|v| *v == 0.0));
        // Three attention layers exported for the single view.
        assert_eq!(out.maps.len(), 3);
    }

    #[test]
    fn deterministic_and_unit_control_is_identity() {
        let cfg = small_config();
        let net = randomized_net(&cfg, 4);
        let xs = vec![toy_latent(&cfg, 5), toy_latent(&cfg, 6)];
        let prompt = toy_prompt(4, cfg.text_dim, 7);
        let cams = vec![
            crate::scene::CameraEmbedding::identity(),
            crate::scene::CameraEmbedding::zeroed(),
        ];
        let a = net.predict_noise(&xs, 17, &prompt, &cams, None).unwrap();
        let b = net.predict_noise(&xs, 17, &prompt, &cams, None).unwrap();
        for (x, y) in a.eps_hat.iter().zip(b.eps_hat.iter()) {
            assert_eq!(x.values, y.values);
        }
        let unit = AttentionControl::new(vec![0, 2], 1.0);
        let c = net
            .predict_noise(&xs, 17, &prompt, &cams, Some(&unit))
            .unwrap();
        for (x, y) in a.eps_hat.iter().zip(c.eps_hat.iter()) {
            assert_eq!(x.values, y.values);
        }
        for (m0, m1) in a.maps.iter().zip(c.maps.iter()) {
            assert_eq!(m0.weights, m1.weights);
        }
    }

    #[test]
    fn camera_embedding_changes_the_prediction() {
        let cfg = small_config();
        let net = randomized_net(&cfg, 8);
        let x = toy_latent(&cfg, 9);
        let prompt = toy_prompt(4, cfg.text_dim, 10);
        let out = net
            .predict_noise(
                &[x.clone(), x],
                40,
                &prompt,
                &[
                    crate::scene::CameraEmbedding::identity(),
                    crate::scene::CameraEmbedding::zeroed(),
                ],
                None,
            )
            .unwrap();
        let diff = out.eps_hat[0]
            .values
            .iter()
            .zip(out.eps_hat[1].values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "camera conditioning is dead (diff {diff})");
    }

    #[test]
    fn control_out_of_range_is_rejected() {
        let cfg = small_config();
        let net = randomized_net(&cfg, 11);
        let x = toy_latent(&cfg, 12);
        let prompt = toy_prompt(3, cfg.text_dim, 13);
        let cam = crate::scene::CameraEmbedding::identity();
        let bad = AttentionControl::new(vec![7], 2.0);
        assert!(net
            .predict_noise(&[x], 5, &prompt, &[cam], Some(&bad))
            .is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small_config();
        let net = randomized_net(&cfg, 14);
        let x = toy_latent(&cfg, 15);
        let prompt = toy_prompt(5, cfg.text_dim, 16);
        let cam = crate::scene::CameraEmbedding::identity();
        let out = net.predict_noise(&[x], 99, &prompt, &[cam], None).unwrap();
        for map in &out.maps {
            for row in map.weights.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        let cfg = small_config();
        let net = randomized_net(&cfg, 17);
        let xs = vec![toy_latent(&cfg, 18)];
        let prompt = toy_prompt(3, cfg.text_dim, 19);
        let cams = vec![crate::scene::CameraEmbedding::identity()];
        let mut wrng = derive_rng(20, "upstream");
        let upstream = vec![Latent {
            values: Array3::from_shape_fn((cfg.latent_channels, 4, 4), |_| {
                wrng.random_range(-1.0..1.0)
            }),
            factor: 8,
        }];
        let loss = |p: &PromptEmbedding| -> f64 {
            let out = net.predict_noise(&xs, 33, p, &cams, None).unwrap();
            out.eps_hat[0]
                .values
                .iter()
                .zip(upstream[0].values.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, caches) = net.forward_views(&xs, 33, &prompt, &cams, None).unwrap();
        let back = net.backward_views(&caches, &upstream).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..prompt.len() {
            for j in (0..cfg.text_dim).step_by(3) {
                let mut p = prompt.clone();
                let mut m = prompt.clone();
                p.vectors[(i, j)] += h;
                m.vectors[(i, j)] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let a = back.g_prompt[(i, j)];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max((a - fd).abs() / denom);
            }
        }
        assert!(worst < 1e-3, "prompt gradient FD mismatch {worst}");
    }

    #[test]
    fn weight_gradients_match_finite_differences_spot_check() {
        let cfg = small_config();
        let mut net = randomized_net(&cfg, 21);
        let xs = vec![toy_latent(&cfg, 22)];
        let prompt = toy_prompt(3, cfg.text_dim, 23);
        let cams = vec![crate::scene::CameraEmbedding::identity()];
        let mut wrng = derive_rng(24, "upstream-w");
        let upstream = vec![Latent {
            values: Array3::from_shape_fn((cfg.latent_channels, 4, 4), |_| {
                wrng.random_range(-1.0..1.0)
            }),
            factor: 8,
        }];
        let (_, caches) = net.forward_views(&xs, 12, &prompt, &cams, None).unwrap();
        let back = net.backward_views(&caches, &upstream).unwrap();
        let analytic: Vec<f64> = back.grads.params().concat();
        // Probe a spread of parameters across the whole network.
        let total = analytic.len();
        let h = 1e-5;
        let mut worst = 0.0f64;
        fn poke(net: &mut UNet, probe: usize, v: f64) -> f64 {
            let mut idx = probe;
            for s in net.params_mut() {
                if idx < s.len() {
                    let old = s[idx];
                    s[idx] = v;
                    return old;
                }
                idx -= s.len();
            }
            unreachable!("probe index out of range");
        }
        let eval = |net: &UNet, xs: &[Latent], upstream: &[Latent]| -> f64 {
            let out = net.predict_noise(xs, 12, &prompt, &cams, None).unwrap();
            out.eps_hat[0]
                .values
                .iter()
                .zip(upstream[0].values.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        for probe in (0..total).step_by(total / 97) {
            let base = poke(&mut net, probe, 0.0);
            poke(&mut net, probe, base + h);
            let lp = eval(&net, &xs, &upstream);
            poke(&mut net, probe, base - h);
            let lm = eval(&net, &xs, &upstream);
            poke(&mut net, probe, base);
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[probe];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((a - fd).abs() / denom);
        }
        assert!(worst < 1e-3, "weight gradient FD mismatch {worst}");
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let cfg = small_config();
        let net = randomized_net(&cfg, 25);
        let meta = CheckpointMeta {
            config: cfg.clone(),
            beta_start: 0.00085,
            beta_end: 0.012,
            timesteps: 100,
            training_seed: 7,
            corpus_hash: "abc".into(),
            trained: true,
        };
        let bytes = net.to_checkpoint_bytes(&meta);
        let (back, meta2) = UNet::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(net.parameter_hash(), back.parameter_hash());
        assert!(back.trained);
        assert_eq!(meta2.corpus_hash, "abc");
        assert_eq!(bytes, back.to_checkpoint_bytes(&meta));
    }
}
