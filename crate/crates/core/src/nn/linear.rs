use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;

use super::{sample_normal, HasParams};

/// Fully connected layer acting on row-major token matrices.
#[derive(Debug, Clone)]
pub struct Linear {
    /// (out, in)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub struct LinearCache {
    input: Array2<f64>,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight =
            Array2::from_shape_vec((out_dim, in_dim), sample_normal(rng, out_dim * in_dim, std))
                .unwrap();
        Linear {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    /// x: (tokens, in) -> (tokens, out)
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        (y, LinearCache { input: x.clone() })
    }

    /// Returns (g_input, g_weight, g_bias).
    pub fn backward(
        &self,
        cache: &LinearCache,
        g_out: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let g_input = super::standardize2(g_out.dot(&self.weight));
        let g_weight = super::standardize2(g_out.t().dot(&cache.input));
        let g_bias = g_out.sum_axis(ndarray::Axis(0));
        (g_input, g_weight, g_bias)
    }

    /// Convenience for a single vector input.
    pub fn forward_vec(&self, x: &Array1<f64>) -> (Array1<f64>, LinearCache) {
        let x2 = x.clone().insert_axis(ndarray::Axis(0));
        let (y, cache) = self.forward(&x2);
        (y.index_axis_move(ndarray::Axis(0), 0), cache)
    }

    pub fn backward_vec(
        &self,
        cache: &LinearCache,
        g_out: &Array1<f64>,
    ) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
        let g2 = g_out.clone().insert_axis(ndarray::Axis(0));
        let (gx, gw, gb) = self.backward(cache, &g2);
        (gx.index_axis_move(ndarray::Axis(0), 0), gw, gb)
    }
}

impl HasParams for Linear {
    fn params(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice().unwrap(), self.bias.as_slice().unwrap()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().unwrap(),
            self.bias.as_slice_mut().unwrap(),
        ]
    }
}
