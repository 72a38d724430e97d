//! Run directories and manifests. A run owns a fresh directory (never reused,
//! never mutated afterwards), registers every artifact it writes with a
//! content hash, and finishes by writing `manifest.json` with the fully
//! resolved config so the run can be replayed bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::to_hex;

use super::config::RunConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub timestamp_unix: u64,
    pub command: String,
    pub seed: u64,
    pub resolved_config: RunConfig,
    /// Referenced input artifacts with their content hashes.
    pub inputs: BTreeMap<String, InputRecord>,
    /// Artifacts written by this run: relative path -> sha256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    to_hex(&h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// An in-progress run: artifact writes go through this so every file ends up
/// hashed in the manifest.
pub struct RunDir {
    pub root: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Create `<out_dir>/<run_id>`; refuses to reuse an existing directory.
    pub fn create(out_dir: &Path, run_id: &str, command: &str, config: &RunConfig) -> Result<RunDir> {
        let root = out_dir.join(run_id);
        if root.exists() {
            return Err(Error::Artifact(format!(
                "run directory {} already exists (runs are append-only)",
                root.display()
            )));
        }
        std::fs::create_dir_all(&root)?;
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(RunDir {
            root,
            manifest: RunManifest {
                run_id: run_id.to_string(),
                timestamp_unix,
                command: command.to_string(),
                seed: config.run.seed,
                resolved_config: config.clone(),
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
            },
        })
    }

    pub fn record_input(&mut self, name: &str, path: &Path) -> Result<()> {
        let sha256 = hash_file(path)?;
        self.manifest.inputs.insert(
            name.to_string(),
            InputRecord {
                path: path.display().to_string(),
                sha256,
            },
        );
        Ok(())
    }

    /// Write an artifact (relative path) and register its hash.
    pub fn write_artifact(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.manifest
            .artifacts
            .insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        self.write_artifact(rel, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let bytes = serde_json::to_vec_pretty(value)?;
        self.write_artifact(rel, &bytes)
    }

    pub fn write_png(&mut self, rel: &str, image: &crate::renderer::Image) -> Result<PathBuf> {
        let rgb = image.to_rgb8();
        let mut bytes: Vec<u8> = Vec::new();
        {
            let encoder = image::codecs::png::PngEncoder::new(&mut bytes);
            use image::ImageEncoder;
            encoder
                .write_image(
                    rgb.as_raw(),
                    rgb.width(),
                    rgb.height(),
                    image::ExtendedColorType::Rgb8,
                )
                .map_err(|e| Error::Artifact(format!("png encode: {e}")))?;
        }
        self.write_artifact(rel, &bytes)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Write `manifest.json` and hand back the manifest.
    pub fn finalize(self) -> Result<RunManifest> {
        let bytes = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(self.root.join("manifest.json"), bytes)?;
        Ok(self.manifest)
    }

    /// Record a failure for scripts to inspect, keeping the directory.
    pub fn write_error(&self, err: &Error) {
        let record = serde_json::json!({
            "error": err.to_string(),
            "exit_code": err.exit_code(),
        });
        let _ = std::fs::write(
            self.root.join("error.json"),
            serde_json::to_vec_pretty(&record).unwrap_or_default(),
        );
    }
}

pub fn load_manifest(run_dir: &Path) -> Result<RunManifest> {
    let path = run_dir.join("manifest.json");
    let bytes =
        std::fs::read(&path).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}
