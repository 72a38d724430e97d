use ndarray::{Array1, Array2, Array3, Array4};
use rand_chacha::ChaCha12Rng;

use super::{sample_normal, HasParams};

/// 2D convolution over (channels, height, width) maps, implemented as
/// im2col + matmul. Padding is fixed at k/2 (same-size output for stride 1).
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out, in, k, k)
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Array4::from_shape_vec(
            (out_ch, in_ch, kernel, kernel),
            sample_normal(rng, out_ch * fan_in, std),
        )
        .unwrap();
        Conv2d {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let p = k / 2;
        let s = self.stride;
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(cin, self.weight.shape()[1], "conv input channels");
        let k = self.kernel();
        let p = k / 2;
        let s = self.stride;
        let (oh, ow) = self.out_size(h, w);
        let mut cols = Array2::zeros((cin * k * k, oh * ow));
        for ci in 0..cin {
            for dy in 0..k {
                for dx in 0..k {
                    let row = (ci * k + dy) * k + dx;
                    for oy in 0..oh {
                        let iy = (oy * s + dy) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + dx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[(row, oy * ow + ox)] = x[(ci, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
        let cout = self.weight.shape()[0];
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .unwrap();
        let mut ymat = wmat.dot(&cols);
        for o in 0..cout {
            let b = self.bias[o];
            ymat.row_mut(o).mapv_inplace(|v| v + b);
        }
        let y = ymat.into_shape_with_order((cout, oh, ow)).unwrap();
        (
            y,
            ConvCache {
                cols,
                in_shape: (cin, h, w),
                out_hw: (oh, ow),
            },
        )
    }

    /// Returns (g_input, g_weight, g_bias).
    pub fn backward(
        &self,
        cache: &ConvCache,
        g_out: &Array3<f64>,
    ) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
        let (cin, h, w) = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let k = self.kernel();
        let p = k / 2;
        let s = self.stride;
        let cout = self.weight.shape()[0];
        let gmat = g_out
            .view()
            .into_shape_with_order((cout, oh * ow))
            .unwrap();
        let g_bias = gmat.sum_axis(ndarray::Axis(1));
        let g_wmat = super::standardize2(gmat.dot(&cache.cols.t()));
        let g_weight = g_wmat.into_shape_with_order((cout, cin, k, k)).unwrap();
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .unwrap();
        let g_cols = wmat.t().dot(&gmat);
        let mut g_x = Array3::zeros((cin, h, w));
        for ci in 0..cin {
            for dy in 0..k {
                for dx in 0..k {
                    let row = (ci * k + dy) * k + dx;
                    for oy in 0..oh {
                        let iy = (oy * s + dy) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + dx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            g_x[(ci, iy as usize, ix as usize)] += g_cols[(row, oy * ow + ox)];
                        }
                    }
                }
            }
        }
        (g_x, g_weight, g_bias)
    }
}

impl HasParams for Conv2d {
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

/// Nearest-neighbor 2x upsample.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = Array3::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(ci, i, j)];
                y[(ci, 2 * i, 2 * j)] = v;
                y[(ci, 2 * i + 1, 2 * j)] = v;
                y[(ci, 2 * i, 2 * j + 1)] = v;
                y[(ci, 2 * i + 1, 2 * j + 1)] = v;
            }
        }
    }
    y
}

/// Backward of [`upsample2`].
pub fn upsample2_backward(g_y: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = (g_y.shape()[0], g_y.shape()[1], g_y.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut g_x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                g_x[(ci, i, j)] = g_y[(ci, 2 * i, 2 * j)]
                    + g_y[(ci, 2 * i + 1, 2 * j)]
                    + g_y[(ci, 2 * i, 2 * j + 1)]
                    + g_y[(ci, 2 * i + 1, 2 * j + 1)];
            }
        }
    }
    g_x
}
