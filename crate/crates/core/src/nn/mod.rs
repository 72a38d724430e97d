//! Minimal neural-network toolkit with explicit forward/backward passes.
//!
//! Layers cache whatever the backward pass needs and return gradients for both
//! their inputs and their parameters. Everything is `f64` and deterministic,
//! which keeps finite-difference checks tight and run artifacts reproducible.

pub mod adam;
pub mod attn;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod params_io;

pub use adam::Adam;
pub use attn::{ColumnReweight, CrossAttention};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::GroupNorm;

use ndarray::Array1;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// A container of trainable parameter buffers with a stable visitation order.
///
/// Gradients reuse the same struct type as the parameters, so optimizers can
/// zip the two slice lists together.
pub trait HasParams {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|s| s.len()).sum()
    }
}

/// Clone `p` with every parameter buffer zeroed; used to allocate gradient
/// accumulators that mirror a parameter struct.
pub fn zeroed_clone<P: HasParams + Clone>(p: &P) -> P {
    let mut c = p.clone();
    for s in c.params_mut() {
        s.fill(0.0);
    }
    c
}

/// dst += scale * src over every parameter buffer.
pub fn add_scaled<P: HasParams>(dst: &mut P, src: &P, scale: f64) {
    let srcs = src.params();
    for (d, s) in dst.params_mut().into_iter().zip(srcs) {
        for (dv, sv) in d.iter_mut().zip(s.iter()) {
            *dv += scale * *sv;
        }
    }
}

/// Largest absolute value across all parameter buffers.
pub fn max_abs_param<P: HasParams>(p: &P) -> f64 {
    p.params()
        .iter()
        .flat_map(|s| s.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Force a C-order copy when a matmul returned a strided result, so the
/// parameter buffers behind `HasParams` always expose contiguous slices.
pub(crate) fn standardize2(a: ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.raw_dim();
        ndarray::Array2::from_shape_vec(dim, a.iter().cloned().collect()).unwrap()
    }
}

pub(crate) fn sample_normal(rng: &mut ChaCha12Rng, n: usize, std: f64) -> Vec<f64> {
    use rand::Rng;
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect()
}

/// x * sigmoid(x), elementwise.
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Derivative of silu.
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of a (possibly fractional) timestep.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Array1<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half as f64 - 1.0)
        } else {
            0.0
        };
        let freq = (-(10_000.0f64).ln() * exponent).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}
