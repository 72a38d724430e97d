//! Scene model: anisotropic Gaussian splats, orbit cameras, pose sampling,
//! procedural synthetic scenes, and the plain-text scene format.

use nalgebra::{Matrix4, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// One anisotropic Gaussian primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSplat {
    /// Center in world units.
    pub position: Vector3<f64>,
    /// Per-axis standard deviations, strictly positive.
    pub scale: Vector3<f64>,
    /// Orientation as a unit quaternion.
    pub rotation: UnitQuaternion<f64>,
    /// RGB in [0,1].
    pub color: [f64; 3],
    /// Opacity in [0,1].
    pub opacity: f64,
}

impl GaussianSplat {
    /// Check the type invariants; returns a description of the first violation.
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.x > 0.0 && self.scale.y > 0.0 && self.scale.z > 0.0) {
            return Err(Error::config(format!(
                "splat scale must be strictly positive, got {:?}",
                self.scale
            )));
        }
        let qn = self.rotation.as_ref().norm();
        if (qn - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("quaternion norm {qn} not unit")));
        }
        for c in self.color {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::config(format!("color {:?} outside [0,1]", self.color)));
            }
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::config(format!("opacity {} outside [0,1]", self.opacity)));
        }
        Ok(())
    }
}

/// An ordered set of splats plus a constant background color.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub splats: Vec<GaussianSplat>,
    pub background: [f64; 3],
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.splats.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::config(format!("splat {i}: {e}")))?;
        }
        for c in self.background {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::config("background outside [0,1]".to_string()));
            }
        }
        Ok(())
    }
}

/// Orbit camera: spherical pose around a look-at point plus pinhole intrinsics.
///
/// Camera space follows the right/up/back convention: the camera looks along
/// its local −z, +x is image-right and +y is image-up. The camera-to-world
/// matrix therefore turns into the identity for `azimuth = elevation = 0`
/// with `look_at = (0, 0, -radius)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Degrees in [0, 360).
    pub azimuth_deg: f64,
    /// Degrees; 0 is the equator, +90 looks straight down.
    pub elevation_deg: f64,
    /// Orbit radius in world units, > 0.
    pub radius: f64,
    /// Orbit center.
    pub look_at: [f64; 3],
    /// Vertical field of view in degrees, in (0, 180).
    pub fov_y_deg: f64,
    /// (height, width) in pixels.
    pub resolution: (usize, usize),
}

impl Camera {
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64) -> Self {
        Camera {
            azimuth_deg: azimuth_deg.rem_euclid(360.0),
            elevation_deg,
            radius,
            look_at: [0.0; 3],
            fov_y_deg: 45.0,
            resolution: (64, 64),
        }
    }

    pub fn with_resolution(mut self, height: usize, width: usize) -> Self {
        self.resolution = (height, width);
        self
    }

    pub fn with_look_at(mut self, look_at: [f64; 3]) -> Self {
        self.look_at = look_at;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius <= 0.0 {
            return Err(Error::config(format!("camera radius {} must be > 0", self.radius)));
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(Error::config(format!("fov_y {} outside (0,180)", self.fov_y_deg)));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(Error::config("resolution must be nonzero"));
        }
        Ok(())
    }

    /// Unit vector from the look-at point toward the camera position.
    fn orbit_direction(&self) -> Vector3<f64> {
        let az = self.azimuth_deg.to_radians();
        let el = self.elevation_deg.to_radians();
        Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos())
    }

    /// World-space camera position.
    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.look_at) + self.radius * self.orbit_direction()
    }

    /// Rigid camera-to-world transform (columns: right, up, back, position).
    pub fn camera_to_world(&self) -> Matrix4<f64> {
        let position = self.position();
        let forward = (Vector3::from(self.look_at) - position).normalize();
        let world_up = Vector3::new(0.0, 1.0, 0.0);
        // Near the poles fall back to a fixed right axis to keep the frame defined.
        let right_raw = forward.cross(&world_up);
        let right = if right_raw.norm() < 1e-9 {
            Vector3::new(1.0, 0.0, 0.0)
        } else {
            right_raw.normalize()
        };
        let back = -forward;
        let up = back.cross(&right);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        m.fixed_view_mut::<3, 1>(0, 1).copy_from(&up);
        m.fixed_view_mut::<3, 1>(0, 2).copy_from(&back);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&position);
        m
    }
}

/// The 16-value pose conditioning vector fed to the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraEmbedding {
    pub values: [f64; 16],
}

impl CameraEmbedding {
    /// Flattened identity pose; used where no real camera applies.
    pub fn identity() -> Self {
        let mut values = [0.0; 16];
        for i in 0..4 {
            values[i * 4 + i] = 1.0;
        }
        CameraEmbedding { values }
    }

    /// All-zero conditioning, for ablating the camera pathway.
    pub fn zeroed() -> Self {
        CameraEmbedding { values: [0.0; 16] }
    }
}

/// The camera-to-world matrix flattened row-major into 16 values.
pub fn camera_embedding(camera: &Camera) -> CameraEmbedding {
    let m = camera.camera_to_world();
    let mut values = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            values[r * 4 + c] = m[(r, c)];
        }
    }
    CameraEmbedding { values }
}

/// Specification for a procedural synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_splats: usize,
    pub seed: u64,
    /// Colors the splats draw from.
    pub palette: Vec<[f64; 3]>,
    /// Positions stay inside the cube [-extent, extent]^3.
    pub extent: f64,
    pub background: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_splats: 48,
            seed: 0,
            palette: vec![
                [0.90, 0.15, 0.15],
                [0.15, 0.35, 0.90],
                [0.95, 0.80, 0.10],
                [0.15, 0.80, 0.30],
            ],
            extent: 0.9,
            background: [0.05, 0.05, 0.08],
        }
    }
}

/// Build a deterministic synthetic scene: splats sit on a jittered lattice
/// inside the extent cube and take their colors from the palette.
pub fn make_synthetic_scene(spec: &SceneSpec) -> Result<Scene> {
    if spec.extent <= 0.0 {
        return Err(Error::config(format!("extent {} must be > 0", spec.extent)));
    }
    if spec.palette.is_empty() {
        return Err(Error::config("palette must be non-empty"));
    }
    let mut rng = derive_rng(spec.seed, "synthetic-scene");
    let n = spec.num_splats;
    let side = (n as f64).cbrt().ceil().max(1.0) as usize;
    let cell = 2.0 * spec.extent / side as f64;
    let mut splats = Vec::with_capacity(n);
    for k in 0..n {
        let (ix, iy, iz) = (k % side, (k / side) % side, k / (side * side));
        let mut jitter = || -> f64 { rng.random_range(-0.4..0.4) };
        let coord = |i: usize, j: f64| -spec.extent + (i as f64 + 0.5 + j) * cell;
        let position = Vector3::new(
            coord(ix, jitter()),
            coord(iy, jitter()),
            coord(iz, jitter()),
        );
        let scale = Vector3::new(
            rng.random_range(0.08..0.22) * spec.extent,
            rng.random_range(0.08..0.22) * spec.extent,
            rng.random_range(0.08..0.22) * spec.extent,
        );
        let rotation = random_unit_quaternion(&mut rng);
        let color = spec.palette[rng.random_range(0..spec.palette.len())];
        let opacity = rng.random_range(0.55..0.95);
        splats.push(GaussianSplat {
            position,
            scale,
            rotation,
            color: [
                color[0].clamp(0.0, 1.0),
                color[1].clamp(0.0, 1.0),
                color[2].clamp(0.0, 1.0),
            ],
            opacity,
        });
    }
    let scene = Scene {
        splats,
        background: spec.background,
    };
    scene.validate()?;
    Ok(scene)
}

fn random_unit_quaternion(rng: &mut ChaCha12Rng) -> UnitQuaternion<f64> {
    use rand_distr::StandardNormal;
    loop {
        let q = nalgebra::Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if q.norm() > 1e-9 {
            return UnitQuaternion::from_quaternion(q);
        }
    }
}

/// Orbit-pose distribution for camera sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRig {
    pub azimuth_range: (f64, f64),
    pub elevation_range: (f64, f64),
    pub radius: f64,
    pub look_at: [f64; 3],
    pub fov_y_deg: f64,
    pub resolution: (usize, usize),
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            azimuth_range: (0.0, 360.0),
            elevation_range: (-30.0, 30.0),
            radius: 2.2,
            look_at: [0.0; 3],
            fov_y_deg: 45.0,
            resolution: (64, 64),
        }
    }
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        if self.azimuth_range.1 < self.azimuth_range.0 || self.elevation_range.1 < self.elevation_range.0 {
            return Err(Error::config("camera range is empty"));
        }
        if self.radius <= 0.0 {
            return Err(Error::config("camera radius must be > 0"));
        }
        Ok(())
    }

    /// Draw one camera with azimuth/elevation uniform over the rig ranges.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> Camera {
        let span = |lo: f64, hi: f64, rng: &mut ChaCha12Rng| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let azimuth = span(self.azimuth_range.0, self.azimuth_range.1, rng);
        let elevation = span(self.elevation_range.0, self.elevation_range.1, rng);
        Camera {
            azimuth_deg: azimuth.rem_euclid(360.0),
            elevation_deg: elevation,
            radius: self.radius,
            look_at: self.look_at,
            fov_y_deg: self.fov_y_deg,
            resolution: self.resolution,
        }
    }

    /// Deterministic evaluation poses: evenly spread azimuths at the midpoint
    /// elevation, offset so they do not coincide with integer grid poses.
    pub fn evaluation_cameras(&self, count: usize) -> Vec<Camera> {
        let elevation = 0.5 * (self.elevation_range.0 + self.elevation_range.1);
        (0..count)
            .map(|i| {
                let az = self.azimuth_range.0
                    + (self.azimuth_range.1 - self.azimuth_range.0)
                        * ((i as f64 + 0.617) / count as f64);
                Camera {
                    azimuth_deg: az.rem_euclid(360.0),
                    elevation_deg: elevation,
                    radius: self.radius,
                    look_at: self.look_at,
                    fov_y_deg: self.fov_y_deg,
                    resolution: self.resolution,
                }
            })
            .collect()
    }
}

/// Seed-taking convenience around [`CameraRig::sample`].
pub fn sample_camera(rng_seed: u64, rig: &CameraRig) -> Result<Camera> {
    rig.validate()?;
    let mut rng = derive_rng(rng_seed, "sample-camera");
    Ok(rig.sample(&mut rng))
}

// ---------------------------------------------------------------------------
// Scene text format: `tokensplat scene v1`. One record per line, floats in
// Rust's shortest round-trip notation, so save/load is lossless.
// ---------------------------------------------------------------------------

pub fn scene_to_text(scene: &Scene) -> String {
    let mut out = String::new();
    out.push_str("tokensplat scene v1\n");
    out.push_str(&format!(
        "background {} {} {}\n",
        scene.background[0], scene.background[1], scene.background[2]
    ));
    for s in &scene.splats {
        let q = s.rotation.as_ref();
        out.push_str(&format!(
            "splat {} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
            s.position.x,
            s.position.y,
            s.position.z,
            s.scale.x,
            s.scale.y,
            s.scale.z,
            q.w,
            q.i,
            q.j,
            q.k,
            s.color[0],
            s.color[1],
            s.color[2],
            s.opacity
        ));
    }
    out
}

pub fn scene_from_text(text: &str) -> Result<Scene> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "tokensplat scene v1" {
        return Err(Error::Artifact(format!("bad scene header {header:?}")));
    }
    let mut scene = Scene::default();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap_or_default();
        let nums: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let nums = nums.map_err(|e| Error::Artifact(format!("line {}: {e}", lineno + 2)))?;
        match tag {
            "background" if nums.len() == 3 => {
                scene.background = [nums[0], nums[1], nums[2]];
            }
            "splat" if nums.len() == 14 => {
                // Stored rotations are already unit; skip renormalization so the
                // round trip is bit exact.
                scene.splats.push(GaussianSplat {
                    position: Vector3::new(nums[0], nums[1], nums[2]),
                    scale: Vector3::new(nums[3], nums[4], nums[5]),
                    rotation: UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(
                        nums[6], nums[7], nums[8], nums[9],
                    )),
                    color: [nums[10], nums[11], nums[12]],
                    opacity: nums[13],
                });
            }
            _ => {
                return Err(Error::Artifact(format!(
                    "line {}: unrecognized record {line:?}",
                    lineno + 2
                )))
            }
        }
    }
    Ok(scene)
}
