//! Experiment harness: configuration, run directories with manifests,
//! metrics, the command implementations behind the CLI, and the
//! embedding-size ablation.

pub mod arrayio;
pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{run_command, Command, CommandArgs};
pub use config::{apply_overrides, load_config, parse_config, RunConfig};
pub use manifest::{load_manifest, sha256_hex, RunDir, RunManifest};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::renderer::Image;

/// PSNR cap reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// 10 log10(1/MSE) for unit-range images, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub num_vectors: usize,
    /// Mean over seeds of the final-decile training loss.
    pub final_loss: f64,
    /// Mean over seeds of held-out-view PSNR in dB.
    pub heldout_psnr: f64,
    pub per_seed_final_loss: Vec<f64>,
    pub per_seed_psnr: Vec<f64>,
}

/// Quantitative summary of a run; written as `metrics.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_view_psnr: Vec<f64>,
    pub mean_psnr: f64,
    pub latent_mse: Option<f64>,
    pub loss_first: Option<f64>,
    pub loss_last: Option<f64>,
    pub ablation: Option<Vec<AblationRow>>,
}

impl MetricsReport {
    pub fn empty() -> Self {
        MetricsReport {
            per_view_psnr: Vec::new(),
            mean_psnr: 0.0,
            latent_mse: None,
            loss_first: None,
            loss_last: None,
            ablation: None,
        }
    }
}

/// Mean of the final ten percent of a loss trace (at least one sample).
pub fn final_decile_mean(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        return f64::NAN;
    }
    let k = (losses.len() / 10).max(1);
    losses[losses.len() - k..].iter().sum::<f64>() / k as f64
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub(crate) fn ensure<T>(opt: Option<T>, what: &str) -> Result<T> {
    opt.ok_or_else(|| Error::Artifact(format!("missing {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn const_image(v: f64) -> Image {
        Image {
            pixels: Array3::from_elem((8, 8, 3), v),
        }
    }

    #[test]
    fn psnr_closed_forms() {
        let a = const_image(0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = const_image(0.6); // mse = 0.01
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = const_image(0.51); // mse = 1e-4
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-6);
    }

    #[test]
    fn psnr_is_symmetric_and_nonnegative() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(3, "psnr-prop");
        for _ in 0..32 {
            let a = Image {
                pixels: Array3::from_shape_fn((4, 4, 3), |_| rng.random_range(0.0..1.0)),
            };
            let b = Image {
                pixels: Array3::from_shape_fn((4, 4, 3), |_| rng.random_range(0.0..1.0)),
            };
            let ab = psnr(&a, &b).unwrap();
            let ba = psnr(&b, &a).unwrap();
            assert_eq!(ab, ba);
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = const_image(0.5);
        let b = Image {
            pixels: Array3::zeros((4, 4, 3)),
        };
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn final_decile_mean_short_series() {
        assert_eq!(final_decile_mean(&[2.0]), 2.0);
        assert_eq!(final_decile_mean(&[1.0, 3.0]), 3.0);
        let long: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(final_decile_mean(&long), (90..100).sum::<usize>() as f64 / 10.0);
    }
}
