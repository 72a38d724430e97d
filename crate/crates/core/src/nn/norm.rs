use ndarray::{Array1, Array3};

use super::HasParams;

/// Group normalization over (channels, height, width) maps with per-channel
/// affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

pub struct GroupNormCache {
    xhat: Array3<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn init(channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels must divide into groups");
        GroupNorm {
            groups,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, GroupNormCache) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let per = c / self.groups;
        let m = (per * h * w) as f64;
        let mut xhat = Array3::zeros((c, h, w));
        let mut inv_std = vec![0.0; self.groups];
        for g in 0..self.groups {
            let lo = g * per;
            let hi = lo + per;
            let mut mean = 0.0;
            for ci in lo..hi {
                for i in 0..h {
                    for j in 0..w {
                        mean += x[(ci, i, j)];
                    }
                }
            }
            mean /= m;
            let mut var = 0.0;
            for ci in lo..hi {
                for i in 0..h {
                    for j in 0..w {
                        let d = x[(ci, i, j)] - mean;
                        var += d * d;
                    }
                }
            }
            var /= m;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[g] = istd;
            for ci in lo..hi {
                for i in 0..h {
                    for j in 0..w {
                        xhat[(ci, i, j)] = (x[(ci, i, j)] - mean) * istd;
                    }
                }
            }
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let (ga, be) = (self.gamma[ci], self.beta[ci]);
            for i in 0..h {
                for j in 0..w {
                    y[(ci, i, j)] = ga * y[(ci, i, j)] + be;
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    /// Returns (g_input, g_gamma, g_beta).
    pub fn backward(
        &self,
        cache: &GroupNormCache,
        g_out: &Array3<f64>,
    ) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
        let (c, h, w) = (
            cache.xhat.shape()[0],
            cache.xhat.shape()[1],
            cache.xhat.shape()[2],
        );
        let per = c / self.groups;
        let m = (per * h * w) as f64;
        let mut g_gamma = Array1::zeros(c);
        let mut g_beta = Array1::zeros(c);
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    g_gamma[ci] += g_out[(ci, i, j)] * cache.xhat[(ci, i, j)];
                    g_beta[ci] += g_out[(ci, i, j)];
                }
            }
        }
        let mut g_x = Array3::zeros((c, h, w));
        for g in 0..self.groups {
            let lo = g * per;
            let hi = lo + per;
            let mut sum_gxhat = 0.0;
            let mut sum_gxhat_xhat = 0.0;
            for ci in lo..hi {
                for i in 0..h {
                    for j in 0..w {
                        let gxh = g_out[(ci, i, j)] * self.gamma[ci];
                        sum_gxhat += gxh;
                        sum_gxhat_xhat += gxh * cache.xhat[(ci, i, j)];
                    }
                }
            }
            let istd = cache.inv_std[g];
            for ci in lo..hi {
                for i in 0..h {
                    for j in 0..w {
                        let gxh = g_out[(ci, i, j)] * self.gamma[ci];
                        g_x[(ci, i, j)] = istd / m
                            * (m * gxh - sum_gxhat - cache.xhat[(ci, i, j)] * sum_gxhat_xhat);
                    }
                }
            }
        }
        (g_x, g_gamma, g_beta)
    }
}

impl HasParams for GroupNorm {
    fn params(&self) -> Vec<&[f64]> {
        vec![self.gamma.as_slice().unwrap(), self.beta.as_slice().unwrap()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.gamma.as_slice_mut().unwrap(),
            self.beta.as_slice_mut().unwrap(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sample_normal;
    use crate::rng::derive_rng;

    #[test]
    fn normalizes_per_group() {
        let mut rng = derive_rng(4, "gn");
        let gn = GroupNorm::init(4, 2);
        let x = Array3::from_shape_vec((4, 3, 3), sample_normal(&mut rng, 36, 2.0)).unwrap();
        let (y, _) = gn.forward(&x);
        for g in 0..2 {
            let vals: Vec<f64> = (g * 2..g * 2 + 2)
                .flat_map(|c| (0..3).flat_map(move |i| (0..3).map(move |j| (c, i, j))))
                .map(|(c, i, j)| y[(c, i, j)])
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gradients_match_fd() {
        let mut rng = derive_rng(5, "gn-fd");
        let mut gn = GroupNorm::init(4, 2);
        // Non-trivial affine parameters.
        for (i, v) in gn.gamma.iter_mut().enumerate() {
            *v = 0.5 + 0.3 * i as f64;
        }
        for (i, v) in gn.beta.iter_mut().enumerate() {
            *v = -0.2 + 0.1 * i as f64;
        }
        let x = Array3::from_shape_vec((4, 2, 3), sample_normal(&mut rng, 24, 1.5)).unwrap();
        let upstream =
            Array3::from_shape_vec((4, 2, 3), sample_normal(&mut rng, 24, 1.0)).unwrap();
        let loss = |gn: &GroupNorm, x: &Array3<f64>| -> f64 {
            let (y, _) = gn.forward(x);
            (&y * &upstream).sum()
        };
        let (_, cache) = gn.forward(&x);
        let (gx, gg, gb) = gn.backward(&cache, &upstream);
        let h = 1e-6;
        for c in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[(c, i, j)] += h;
                    xm[(c, i, j)] -= h;
                    let fd = (loss(&gn, &xp) - loss(&gn, &xm)) / (2.0 * h);
                    assert!((fd - gx[(c, i, j)]).abs() < 1e-6, "gx at {:?}", (c, i, j));
                }
            }
            let orig = gn.gamma[c];
            gn.gamma[c] = orig + h;
            let lp = loss(&gn, &x);
            gn.gamma[c] = orig - h;
            let lm = loss(&gn, &x);
            gn.gamma[c] = orig;
            assert!(((lp - lm) / (2.0 * h) - gg[c]).abs() < 1e-6);
            let orig = gn.beta[c];
            gn.beta[c] = orig + h;
            let lp = loss(&gn, &x);
            gn.beta[c] = orig - h;
            let lm = loss(&gn, &x);
            gn.beta[c] = orig;
            assert!(((lp - lm) / (2.0 * h) - gb[c]).abs() < 1e-6);
        }
    }
}
