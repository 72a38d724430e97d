use ndarray::{s, Array2};
use rand_chacha::ChaCha12Rng;

use super::{HasParams, Linear};

/// Post-softmax column re-weighting: attention entries whose key index is in
/// `indices` are multiplied by `factor`, nothing is renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnReweight {
    pub indices: Vec<usize>,
    pub factor: f64,
}

impl ColumnReweight {
    fn column_scales(&self, keys: usize) -> Vec<f64> {
        let mut scales = vec![1.0; keys];
        for &j in &self.indices {
            if j < keys {
                scales[j] = self.factor;
            }
        }
        scales
    }
}

/// Multi-head cross-attention from query tokens to a separate context
/// sequence, with the per-head attention maps exposed.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub heads: usize,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
}

pub struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Pre-reweight softmax per head.
    attn: Vec<Array2<f64>>,
    scales: Option<Vec<f64>>,
    q_cache: super::linear::LinearCache,
    k_cache: super::linear::LinearCache,
    v_cache: super::linear::LinearCache,
    out_cache: super::linear::LinearCache,
}

impl CrossAttention {
    pub fn init(channels: usize, ctx_dim: usize, heads: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(channels % heads == 0, "channels must divide into heads");
        CrossAttention {
            heads,
            to_q: Linear::init(channels, channels, rng),
            to_k: Linear::init(ctx_dim, channels, rng),
            to_v: Linear::init(ctx_dim, channels, rng),
            to_out: Linear::init(channels, channels, rng),
        }
    }

    /// x: (queries, channels), ctx: (keys, ctx_dim).
    ///
    /// Returns the output, the exported attention map with rows stacked
    /// head-major as (heads * queries, keys) — each row sums to 1 before any
    /// re-weighting — and the cache for backward.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        ctx: &Array2<f64>,
        reweight: Option<&ColumnReweight>,
    ) -> (Array2<f64>, Array2<f64>, AttnCache) {
        let (nq, c) = (x.shape()[0], x.shape()[1]);
        let nk = ctx.shape()[0];
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, q_cache) = self.to_q.forward(x);
        let (k, k_cache) = self.to_k.forward(ctx);
        let (v, v_cache) = self.to_v.forward(ctx);
        let scales = reweight.map(|r| r.column_scales(nk));

        let mut out = Array2::zeros((nq, c));
        let mut exported = Array2::zeros((self.heads * nq, nk));
        let mut attn_per_head = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let qh = q.slice(cols).into_owned();
            let kh = k.slice(cols).into_owned();
            let vh = v.slice(cols).into_owned();
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            let attn = softmax_rows(&scores);
            let mut used = attn.clone();
            if let Some(scales) = &scales {
                for mut row in used.rows_mut() {
                    for (j, val) in row.iter_mut().enumerate() {
                        *val *= scales[j];
                    }
                }
            }
            exported
                .slice_mut(s![head * nq..(head + 1) * nq, ..])
                .assign(&used);
            let oh = used.dot(&vh);
            out.slice_mut(cols).assign(&oh);
            attn_per_head.push(attn);
        }
        let (y, out_cache) = self.to_out.forward(&out);
        (
            y,
            exported,
            AttnCache {
                q,
                k,
                v,
                attn: attn_per_head,
                scales,
                q_cache,
                k_cache,
                v_cache,
                out_cache,
            },
        )
    }

    /// Returns (g_x, g_ctx, grads) where `grads` mirrors the parameter struct.
    pub fn backward(
        &self,
        cache: &AttnCache,
        g_y: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, CrossAttention) {
        let nq = cache.q.shape()[0];
        let c = cache.q.shape()[1];
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (g_concat, g_wout, g_bout) = self.to_out.backward(&cache.out_cache, g_y);

        let mut g_q = Array2::zeros(cache.q.raw_dim());
        let mut g_k = Array2::zeros(cache.k.raw_dim());
        let mut g_v = Array2::zeros(cache.v.raw_dim());
        for head in 0..self.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let qh = cache.q.slice(cols).into_owned();
            let kh = cache.k.slice(cols).into_owned();
            let vh = cache.v.slice(cols).into_owned();
            let attn = &cache.attn[head];
            let mut used = attn.clone();
            if let Some(scales) = &cache.scales {
                for mut row in used.rows_mut() {
                    for (j, val) in row.iter_mut().enumerate() {
                        *val *= scales[j];
                    }
                }
            }
            let g_oh = g_concat.slice(cols).into_owned();
            let mut g_used = g_oh.dot(&vh.t());
            let g_vh = used.t().dot(&g_oh);
            // Chain through the column scaling back to the raw softmax.
            if let Some(scales) = &cache.scales {
                for mut row in g_used.rows_mut() {
                    for (j, val) in row.iter_mut().enumerate() {
                        *val *= scales[j];
                    }
                }
            }
            // Softmax backward, row-wise.
            let mut g_scores = Array2::zeros((nq, attn.shape()[1]));
            for r in 0..nq {
                let a_row = attn.row(r);
                let g_row = g_used.row(r);
                let dot: f64 = a_row.iter().zip(g_row.iter()).map(|(a, g)| a * g).sum();
                for j in 0..a_row.len() {
                    g_scores[(r, j)] = a_row[j] * (g_row[j] - dot);
                }
            }
            g_scores *= scale;
            let g_qh = g_scores.dot(&kh);
            let g_kh = g_scores.t().dot(&qh);
            g_q.slice_mut(cols).assign(&g_qh);
            g_k.slice_mut(cols).assign(&g_kh);
            g_v.slice_mut(cols).assign(&g_vh);
        }

        let (g_x, g_wq, g_bq) = self.to_q.backward(&cache.q_cache, &g_q);
        let (g_ctx_k, g_wk, g_bk) = self.to_k.backward(&cache.k_cache, &g_k);
        let (g_ctx_v, g_wv, g_bv) = self.to_v.backward(&cache.v_cache, &g_v);
        let g_ctx = g_ctx_k + g_ctx_v;

        let grads = CrossAttention {
            heads: self.heads,
            to_q: Linear { weight: g_wq, bias: g_bq },
            to_k: Linear { weight: g_wk, bias: g_bk },
            to_v: Linear { weight: g_wv, bias: g_bv },
            to_out: Linear { weight: g_wout, bias: g_bout },
        };
        (g_x, g_ctx, grads)
    }
}

impl HasParams for CrossAttention {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.to_q.params();
        p.extend(self.to_k.params());
        p.extend(self.to_v.params());
        p.extend(self.to_out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.to_q.params_mut();
        p.extend(self.to_k.params_mut());
        p.extend(self.to_v.params_mut());
        p.extend(self.to_out.params_mut());
        p
    }
}

/// Numerically stable row softmax.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
