//! Image/latent codec. Two backends behind one interface: an exactly
//! invertible orthonormal patch transform (the default — inversion tests are
//! not confounded by codec loss) and a small trained convolutional
//! autoencoder with a 4-channel latent at 8x spatial downsampling.
//!
//! Encoding is deterministic in both modes; there is no sampling step.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Adam, Conv2d, HasParams};
use crate::renderer::Image;
use crate::rng::derive_rng;

/// Latent tensor: (channels, h, w) at `factor`-fold spatial downsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub values: Array3<f64>,
    pub factor: usize,
}

impl Latent {
    pub fn zeros_like(other: &Latent) -> Latent {
        Latent {
            values: Array3::zeros(other.values.raw_dim()),
            factor: other.factor,
        }
    }

    pub fn mse(&self, other: &Latent) -> Result<f64> {
        if self.values.shape() != other.values.shape() {
            return Err(Error::shape(format!(
                "latent shapes {:?} vs {:?}",
                self.values.shape(),
                other.values.shape()
            )));
        }
        let n = self.values.len() as f64;
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    Orthonormal,
    Learned,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecConfig {
    pub mode: CodecMode,
    /// Patch edge for the orthonormal transform.
    pub patch_size: usize,
    /// Latent channels in learned mode (orthonormal mode derives its own).
    pub latent_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            mode: CodecMode::Orthonormal,
            patch_size: 8,
            latent_channels: 4,
        }
    }
}

impl CodecConfig {
    pub fn effective_latent_channels(&self) -> usize {
        match self.mode {
            CodecMode::Orthonormal => 3 * self.patch_size * self.patch_size,
            CodecMode::Learned => self.latent_channels,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        match self.mode {
            CodecMode::Orthonormal => self.patch_size,
            CodecMode::Learned => LEARNED_FACTOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be >= 1"));
        }
        if self.mode == CodecMode::Learned && self.latent_channels == 0 {
            return Err(Error::config("latent_channels must be >= 1"));
        }
        Ok(())
    }
}

/// Spatial downsampling of the learned autoencoder (three stride-2 stages).
pub const LEARNED_FACTOR: usize = 8;

pub enum Codec {
    Orthonormal(OrthonormalCodec),
    Learned(Autoencoder),
}

impl Codec {
    pub fn from_config(config: &CodecConfig) -> Result<Codec> {
        config.validate()?;
        Ok(match config.mode {
            CodecMode::Orthonormal => Codec::Orthonormal(OrthonormalCodec::new(config.patch_size)),
            CodecMode::Learned => Codec::Learned(Autoencoder::init(config.latent_channels, 0)),
        })
    }

    pub fn encode(&self, image: &Image) -> Result<Latent> {
        match self {
            Codec::Orthonormal(c) => c.encode(image),
            Codec::Learned(c) => c.encode(image),
        }
    }

    pub fn decode(&self, latent: &Latent) -> Result<Image> {
        match self {
            Codec::Orthonormal(c) => c.decode(latent),
            Codec::Learned(c) => c.decode(latent),
        }
    }

    /// Vector–Jacobian product of `encode`: pulls a latent-space gradient back
    /// to image space.
    pub fn encode_vjp(&self, image: &Image, g_latent: &Latent) -> Result<Array3<f64>> {
        match self {
            Codec::Orthonormal(c) => c.encode_vjp(image, g_latent),
            Codec::Learned(c) => c.encode_vjp(image, g_latent),
        }
    }

    pub fn downsample_factor(&self) -> usize {
        match self {
            Codec::Orthonormal(c) => c.patch_size,
            Codec::Learned(_) => LEARNED_FACTOR,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            Codec::Orthonormal(c) => c.basis.shape()[0],
            Codec::Learned(c) => c.latent_channels,
        }
    }

    pub fn latent_shape_for(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let f = self.downsample_factor();
        if height % f != 0 || width % f != 0 {
            return Err(Error::config(format!(
                "image {height}x{width} not divisible by codec factor {f}"
            )));
        }
        Ok((self.latent_channels(), height / f, width / f))
    }
}

// ---------------------------------------------------------------------------
// Orthonormal patch transform
// ---------------------------------------------------------------------------

pub struct OrthonormalCodec {
    pub patch_size: usize,
    /// (d, d) with orthonormal rows, d = 3 * patch^2.
    basis: Array2<f64>,
}

impl OrthonormalCodec {
    pub fn new(patch_size: usize) -> Self {
        let d = 3 * patch_size * patch_size;
        let mut rng = derive_rng(0x0C0DEC, &format!("orthonormal-basis-{patch_size}"));
        // Random Gaussian matrix orthonormalized by modified Gram-Schmidt with
        // one re-orthogonalization pass.
        let mut basis =
            Array2::from_shape_vec((d, d), nn::sample_normal(&mut rng, d * d, 1.0)).unwrap();
        for i in 0..d {
            for _ in 0..2 {
                for j in 0..i {
                    let dot: f64 = {
                        let (qi, qj) = (basis.row(i), basis.row(j));
                        qi.iter().zip(qj.iter()).map(|(a, b)| a * b).sum()
                    };
                    let qj = basis.row(j).into_owned();
                    basis
                        .row_mut(i)
                        .iter_mut()
                        .zip(qj.iter())
                        .for_each(|(v, q)| *v -= dot * q);
                }
            }
            let norm: f64 = basis.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 1e-10, "degenerate basis row");
            basis.row_mut(i).mapv_inplace(|v| v / norm);
        }
        OrthonormalCodec { patch_size, basis }
    }

    fn patches(&self, image: &Image) -> Result<(Array2<f64>, usize, usize)> {
        let p = self.patch_size;
        let (h, w) = (image.height(), image.width());
        if h % p != 0 || w % p != 0 {
            return Err(Error::config(format!(
                "image {h}x{w} not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let d = 3 * p * p;
        let mut cols = Array2::zeros((d, gh * gw));
        for gy in 0..gh {
            for gx in 0..gw {
                let col = gy * gw + gx;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            cols[((c * p + dy) * p + dx, col)] =
                                image.pixels[(gy * p + dy, gx * p + dx, c)];
                        }
                    }
                }
            }
        }
        Ok((cols, gh, gw))
    }

    fn unpatch(&self, cols: &Array2<f64>, gh: usize, gw: usize) -> Array3<f64> {
        let p = self.patch_size;
        let mut pixels = Array3::zeros((gh * p, gw * p, 3));
        for gy in 0..gh {
            for gx in 0..gw {
                let col = gy * gw + gx;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            pixels[(gy * p + dy, gx * p + dx, c)] =
                                cols[((c * p + dy) * p + dx, col)];
                        }
                    }
                }
            }
        }
        pixels
    }

    pub fn encode(&self, image: &Image) -> Result<Latent> {
        let (cols, gh, gw) = self.patches(image)?;
        let latent_mat = self.basis.dot(&cols);
        let values = latent_mat
            .into_shape_with_order((self.basis.shape()[0], gh, gw))
            .unwrap();
        Ok(Latent {
            values,
            factor: self.patch_size,
        })
    }

    pub fn decode(&self, latent: &Latent) -> Result<Image> {
        let d = self.basis.shape()[0];
        let shape = latent.values.shape();
        if shape[0] != d {
            return Err(Error::shape(format!(
                "latent has {} channels, codec expects {d}",
                shape[0]
            )));
        }
        let (gh, gw) = (shape[1], shape[2]);
        let latent_mat = latent
            .values
            .view()
            .into_shape_with_order((d, gh * gw))
            .unwrap();
        let cols = self.basis.t().dot(&latent_mat);
        let mut pixels = self.unpatch(&cols, gh, gw);
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(Image { pixels })
    }

    pub fn encode_vjp(&self, image: &Image, g_latent: &Latent) -> Result<Array3<f64>> {
        let p = self.patch_size;
        let (h, w) = (image.height(), image.width());
        let (gh, gw) = (h / p, w / p);
        let d = self.basis.shape()[0];
        if g_latent.values.shape() != [d, gh, gw] {
            return Err(Error::shape("latent gradient shape mismatch".to_string()));
        }
        let g_mat = g_latent
            .values
            .view()
            .into_shape_with_order((d, gh * gw))
            .unwrap();
        let g_cols = self.basis.t().dot(&g_mat);
        Ok(self.unpatch(&g_cols, gh, gw))
    }
}

// ---------------------------------------------------------------------------
// Learned convolutional autoencoder
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct Autoencoder {
    pub latent_channels: usize,
    pub trained: bool,
    pub seed: u64,
    enc: [Conv2d; 4],
    dec: [Conv2d; 5],
}

struct EncCache {
    pre: Vec<Array3<f64>>,
    convs: Vec<crate::nn::conv::ConvCache>,
}

struct DecCache {
    pre: Vec<Array3<f64>>,
    convs: Vec<crate::nn::conv::ConvCache>,
}

impl Autoencoder {
    pub fn init(latent_channels: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, "autoencoder-init");
        let enc = [
            Conv2d::init(3, 16, 3, 2, &mut rng),
            Conv2d::init(16, 32, 3, 2, &mut rng),
            Conv2d::init(32, 32, 3, 2, &mut rng),
            Conv2d::init(32, latent_channels, 3, 1, &mut rng),
        ];
        let dec = [
            Conv2d::init(latent_channels, 32, 3, 1, &mut rng),
            Conv2d::init(32, 32, 3, 1, &mut rng),
            Conv2d::init(32, 16, 3, 1, &mut rng),
            Conv2d::init(16, 16, 3, 1, &mut rng),
            Conv2d::init(16, 3, 3, 1, &mut rng),
        ];
        Autoencoder {
            latent_channels,
            trained: false,
            seed,
            enc,
            dec,
        }
    }

    fn image_to_chw(image: &Image) -> Array3<f64> {
        let (h, w) = (image.height(), image.width());
        Array3::from_shape_fn((3, h, w), |(c, i, j)| image.pixels[(i, j, c)])
    }

    fn chw_to_pixels(x: &Array3<f64>) -> Array3<f64> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        Array3::from_shape_fn((h, w, 3), |(i, j, c)| x[(c, i, j)])
    }

    fn encode_with_cache(&self, image: &Image) -> Result<(Array3<f64>, EncCache)> {
        let (h, w) = (image.height(), image.width());
        if h % LEARNED_FACTOR != 0 || w % LEARNED_FACTOR != 0 {
            return Err(Error::config(format!(
                "image {h}x{w} not divisible by factor {LEARNED_FACTOR}"
            )));
        }
        let mut x = Self::image_to_chw(image);
        let mut pre = Vec::new();
        let mut convs = Vec::new();
        for (i, conv) in self.enc.iter().enumerate() {
            let (y, cache) = conv.forward(&x);
            convs.push(cache);
            if i + 1 < self.enc.len() {
                pre.push(y.clone());
                x = y.mapv(nn::silu);
            } else {
                x = y;
            }
        }
        Ok((x, EncCache { pre, convs }))
    }

    /// Backward through the encoder to the image input only.
    fn encode_backward_input(&self, cache: &EncCache, g_latent: &Array3<f64>) -> Array3<f64> {
        let mut g = g_latent.clone();
        for i in (0..self.enc.len()).rev() {
            if i + 1 < self.enc.len() {
                let pre = &cache.pre[i];
                g.zip_mut_with(pre, |gv, pv| *gv *= nn::silu_grad(*pv));
            }
            let (gx, _, _) = self.enc[i].backward(&cache.convs[i], &g);
            g = gx;
        }
        g
    }

    fn decode_raw(&self, latent: &Array3<f64>) -> (Array3<f64>, DecCache) {
        let mut x = latent.clone();
        let mut pre = Vec::new();
        let mut convs = Vec::new();
        for (i, conv) in self.dec.iter().enumerate() {
            if (1..=3).contains(&i) {
                x = crate::nn::conv::upsample2(&x);
            }
            let (y, cache) = conv.forward(&x);
            convs.push(cache);
            if i + 1 < self.dec.len() {
                pre.push(y.clone());
                x = y.mapv(nn::silu);
            } else {
                x = y;
            }
        }
        (x, DecCache { pre, convs })
    }

    fn decode_backward(
        &self,
        cache: &DecCache,
        g_out: &Array3<f64>,
        grads: &mut Autoencoder,
    ) -> Array3<f64> {
        let mut g = g_out.clone();
        for i in (0..self.dec.len()).rev() {
            if i + 1 < self.dec.len() {
                let pre = &cache.pre[i];
                g.zip_mut_with(pre, |gv, pv| *gv *= nn::silu_grad(*pv));
            }
            let (gx, gw, gb) = self.dec[i].backward(&cache.convs[i], &g);
            grads.dec[i].weight += &gw;
            grads.dec[i].bias += &gb;
            g = if (1..=3).contains(&i) {
                crate::nn::conv::upsample2_backward(&gx)
            } else {
                gx
            };
        }
        g
    }

    pub fn encode(&self, image: &Image) -> Result<Latent> {
        let (x, _) = self.encode_with_cache(image)?;
        Ok(Latent {
            values: x,
            factor: LEARNED_FACTOR,
        })
    }

    pub fn decode(&self, latent: &Latent) -> Result<Image> {
        if latent.values.shape()[0] != self.latent_channels {
            return Err(Error::shape(format!(
                "latent has {} channels, autoencoder expects {}",
                latent.values.shape()[0],
                self.latent_channels
            )));
        }
        let (raw, _) = self.decode_raw(&latent.values);
        let mut pixels = Self::chw_to_pixels(&raw);
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(Image { pixels })
    }

    pub fn encode_vjp(&self, image: &Image, g_latent: &Latent) -> Result<Array3<f64>> {
        let (latent, cache) = self.encode_with_cache(image)?;
        if latent.shape() != g_latent.values.shape() {
            return Err(Error::shape("latent gradient shape mismatch".to_string()));
        }
        let g_chw = self.encode_backward_input(&cache, &g_latent.values);
        Ok(Self::chw_to_pixels(&g_chw))
    }
}

impl HasParams for Autoencoder {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = Vec::new();
        for c in &self.enc {
            p.extend(c.params());
        }
        for c in &self.dec {
            p.extend(c.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = Vec::new();
        for c in &mut self.enc {
            p.extend(c.params_mut());
        }
        for c in &mut self.dec {
            p.extend(c.params_mut());
        }
        p
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecCheckpointMeta {
    pub latent_channels: usize,
    pub seed: u64,
    pub trained: bool,
}

#[derive(Serialize, Deserialize)]
struct CodecCheckpointFile {
    meta: CodecCheckpointMeta,
    tensors: Vec<crate::nn::params_io::TensorRecord>,
}

impl Autoencoder {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let file = CodecCheckpointFile {
            meta: CodecCheckpointMeta {
                latent_channels: self.latent_channels,
                seed: self.seed,
                trained: self.trained,
            },
            tensors: crate::nn::params_io::encode_params(self),
        };
        serde_json::to_vec(&file).expect("codec checkpoint serializes")
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Autoencoder> {
        let file: CodecCheckpointFile = serde_json::from_slice(bytes)?;
        let mut ae = Autoencoder::init(file.meta.latent_channels, file.meta.seed);
        crate::nn::params_io::decode_params(&mut ae, &file.tensors)?;
        ae.trained = file.meta.trained;
        Ok(ae)
    }
}

/// Train the learned autoencoder on reconstruction MSE.
///
/// Returns the trained codec plus the per-epoch mean loss curve. Deterministic
/// given the seed.
pub fn train_codec(
    dataset: &[Image],
    config: &CodecConfig,
    epochs: usize,
    seed: u64,
) -> Result<(Codec, Vec<f64>)> {
    if config.mode != CodecMode::Learned {
        return Err(Error::config("train_codec requires learned mode"));
    }
    if dataset.is_empty() {
        return Err(Error::config("train_codec requires a non-empty dataset"));
    }
    let mut ae = Autoencoder::init(config.latent_channels, seed);
    let mut adam = Adam::new(2e-3);
    let mut order_rng = derive_rng(seed, "codec-train-order");
    let mut losses = Vec::with_capacity(epochs);
    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            let j = order_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let image = &dataset[idx];
            let (latent, enc_cache) = ae.encode_with_cache(image)?;
            let (out, dec_cache) = ae.decode_raw(&latent);
            let target = Autoencoder::image_to_chw(image);
            let n = out.len() as f64;
            let diff = &out - &target;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
            epoch_loss += loss;
            let g_out = diff.mapv(|d| 2.0 * d / n);
            let mut grads = nn::zeroed_clone(&ae);
            let g_latent = ae.decode_backward(&dec_cache, &g_out, &mut grads);
            let mut g = g_latent;
            for i in (0..ae.enc.len()).rev() {
                if i + 1 < ae.enc.len() {
                    let pre = &enc_cache.pre[i];
                    g.zip_mut_with(pre, |gv, pv| *gv *= nn::silu_grad(*pv));
                }
                let (gx, gw, gb) = ae.enc[i].backward(&enc_cache.convs[i], &g);
                grads.enc[i].weight += &gw;
                grads.enc[i].bias += &gb;
                g = gx;
            }
            adam.step(&mut ae, &grads);
        }
        losses.push(epoch_loss / dataset.len() as f64);
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite {
            context: "codec training".into(),
            detail: "loss diverged".into(),
        });
    }
    ae.trained = true;
    Ok((Codec::Learned(ae), losses))
}
