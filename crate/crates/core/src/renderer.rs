//! Differentiable splat rasterizer: perspective-project each Gaussian to a 2D
//! footprint, depth-sort, and alpha-composite front to back. The backward pass
//! chains pixel gradients through the compositing formula back to every splat
//! parameter, including the perspective Jacobian's dependence on the mean and
//! the quaternion normalization.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use ndarray::Array3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{Camera, Scene};

/// Regularizer added to the projected covariance diagonal.
const COV2D_EPS: f64 = 1e-6;
/// Upper clamp on per-splat alpha so transmittance never vanishes.
const ALPHA_MAX: f64 = 0.999;
/// Splats closer than this (or behind the camera) are skipped.
const NEAR_CLIP: f64 = 1e-4;

/// An RGB image with values in [0,1], shape (height, width, 3).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            pixels: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Convert to an 8-bit RGB image for PNG export.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                (self.pixels[(y as usize, x as usize, c)].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.pixels.shape() != other.pixels.shape() {
            return Err(Error::shape(format!(
                "image shapes {:?} vs {:?}",
                self.pixels.shape(),
                other.pixels.shape()
            )));
        }
        let n = self.pixels.len() as f64;
        let sum: f64 = self
            .pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / n)
    }
}

/// Gradients of a scalar loss with respect to one splat's parameters.
///
/// `rotation` is the gradient with respect to the raw quaternion components
/// (w, i, j, k) with the unit-normalization chain included, so nudging a
/// component and re-normalizing matches finite differences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplatGradients {
    pub position: [f64; 3],
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
    pub color: [f64; 3],
    pub opacity: f64,
}

impl SplatGradients {
    pub fn max_abs(&self) -> f64 {
        self.position
            .iter()
            .chain(self.scale.iter())
            .chain(self.rotation.iter())
            .chain(self.color.iter())
            .chain(std::iter::once(&self.opacity))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Everything the per-pixel loops need about one projected splat.
struct Projected {
    /// Index into the original splat list.
    index: usize,
    depth: f64,
    /// Projected center in pixel coordinates.
    center: Vector2<f64>,
    /// Inverse of the 2D covariance.
    conic: Matrix2<f64>,
    color: [f64; 3],
    opacity: f64,
    // Quantities kept for the backward chain.
    sigma_cam: Matrix3<f64>,
    jac: Matrix2x3<f64>,
    p_cam: Vector3<f64>,
    rot: Matrix3<f64>,
    scale: Vector3<f64>,
    quat: [f64; 4],
}

struct Frame {
    w_rot: Matrix3<f64>,
    fx: f64,
    fy: f64,
}

fn project_splats(scene: &Scene, camera: &Camera) -> Result<(Vec<Projected>, Frame)> {
    camera.validate()?;
    let (h, w) = camera.resolution;
    let c2w = camera.camera_to_world();
    let r_c2w = c2w.fixed_view::<3, 3>(0, 0).into_owned();
    let t_c2w = c2w.fixed_view::<3, 1>(0, 3).into_owned();
    let w_rot = r_c2w.transpose();
    let t_wc = -w_rot * t_c2w;

    let fy = 0.5 * h as f64 / (0.5 * camera.fov_y_deg.to_radians()).tan();
    let fx = fy;
    let (cx, cy) = (0.5 * w as f64, 0.5 * h as f64);

    let mut projected = Vec::with_capacity(scene.splats.len());
    for (index, s) in scene.splats.iter().enumerate() {
        let p_cam = w_rot * s.position + t_wc;
        let depth = -p_cam.z;
        if depth <= NEAR_CLIP {
            continue;
        }
        let u = fx * p_cam.x / depth + cx;
        let v = -fy * p_cam.y / depth + cy;

        // Rebuild the rotation from the normalized raw quaternion so the
        // backward pass can chain through the normalization.
        let q_raw = s.rotation.as_ref();
        let qn = nalgebra::Quaternion::new(q_raw.w, q_raw.i, q_raw.j, q_raw.k).normalize();
        let rot = quat_to_matrix(&[qn.w, qn.i, qn.j, qn.k]);
        let d = Matrix3::from_diagonal(&Vector3::new(
            s.scale.x * s.scale.x,
            s.scale.y * s.scale.y,
            s.scale.z * s.scale.z,
        ));
        let sigma3 = rot * d * rot.transpose();
        let sigma_cam = w_rot * sigma3 * w_rot.transpose();

        let z2 = depth * depth;
        let jac = Matrix2x3::new(
            fx / depth,
            0.0,
            fx * p_cam.x / z2,
            0.0,
            -fy / depth,
            -fy * p_cam.y / z2,
        );
        let mut sigma2 = jac * sigma_cam * jac.transpose();
        sigma2[(0, 0)] += COV2D_EPS;
        sigma2[(1, 1)] += COV2D_EPS;
        let det = sigma2[(0, 0)] * sigma2[(1, 1)] - sigma2[(0, 1)] * sigma2[(1, 0)];
        if det <= 0.0 || !det.is_finite() {
            return Err(Error::shape(format!("degenerate projected covariance for splat {index}")));
        }
        let conic = Matrix2::new(
            sigma2[(1, 1)] / det,
            -sigma2[(0, 1)] / det,
            -sigma2[(1, 0)] / det,
            sigma2[(0, 0)] / det,
        );
        projected.push(Projected {
            index,
            depth,
            center: Vector2::new(u, v),
            conic,
            color: s.color,
            opacity: s.opacity,
            sigma_cam,
            jac,
            p_cam,
            rot,
            scale: s.scale,
            quat: [q_raw.w, q_raw.i, q_raw.j, q_raw.k],
        });
    }
    // Canonical front-to-back order. Ties on depth break on the splat's byte
    // encoding so the order is invariant under input permutation.
    projected.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then_with(|| splat_key(a).cmp(&splat_key(b)))
    });
    Ok((projected, Frame { w_rot, fx, fy }))
}

fn splat_key(p: &Projected) -> [u64; 14] {
    let s = &p;
    [
        s.p_cam.x.to_bits(),
        s.p_cam.y.to_bits(),
        s.p_cam.z.to_bits(),
        s.scale.x.to_bits(),
        s.scale.y.to_bits(),
        s.scale.z.to_bits(),
        s.quat[0].to_bits(),
        s.quat[1].to_bits(),
        s.quat[2].to_bits(),
        s.quat[3].to_bits(),
        s.color[0].to_bits(),
        s.color[1].to_bits(),
        s.color[2].to_bits(),
        s.opacity.to_bits(),
    ]
}

fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of the rotation matrix with respect to each unit
/// quaternion component.
fn quat_matrix_partials(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0),
        Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x),
        Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y),
        Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0),
    ]
}

/// Render the scene from the camera's viewpoint.
pub fn render(scene: &Scene, camera: &Camera) -> Result<Image> {
    let (projected, _frame) = project_splats(scene, camera)?;
    let (h, w) = camera.resolution;
    let bg = scene.background;

    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let py = row as f64 + 0.5;
            let mut out = vec![0.0f64; w * 3];
            for col in 0..w {
                let px = col as f64 + 0.5;
                let mut color = [0.0f64; 3];
                let mut transmittance = 1.0f64;
                for p in &projected {
                    let d = Vector2::new(px - p.center.x, py - p.center.y);
                    let power = 0.5 * (d.transpose() * p.conic * d)[(0, 0)];
                    let alpha = (p.opacity * (-power).exp()).clamp(0.0, ALPHA_MAX);
                    let weight = alpha * transmittance;
                    color[0] += p.color[0] * weight;
                    color[1] += p.color[1] * weight;
                    color[2] += p.color[2] * weight;
                    transmittance *= 1.0 - alpha;
                }
                for c in 0..3 {
                    out[col * 3 + c] = (color[c] + bg[c] * transmittance).clamp(0.0, 1.0);
                }
            }
            out
        })
        .collect();

    let mut pixels = Array3::zeros((h, w, 3));
    for (row, data) in rows.into_iter().enumerate() {
        for col in 0..w {
            for c in 0..3 {
                pixels[(row, col, c)] = data[col * 3 + c];
            }
        }
    }
    Ok(Image { pixels })
}

/// Per-splat accumulator used while walking pixels.
#[derive(Clone, Copy, Default)]
struct PixelAccum {
    d_center: [f64; 2],
    // Symmetric gradient wrt the conic matrix: (00, 01, 11).
    d_conic: [f64; 3],
    d_opacity: f64,
    d_color: [f64; 3],
}

/// Backpropagate `pixel_loss_gradient` (dL/dpixel, image-shaped) to per-splat
/// parameter gradients. Splats behind the camera get zero gradients.
pub fn render_with_gradients(
    scene: &Scene,
    camera: &Camera,
    pixel_loss_gradient: &Array3<f64>,
) -> Result<Vec<SplatGradients>> {
    let (h, w) = camera.resolution;
    if pixel_loss_gradient.shape() != [h, w, 3] {
        return Err(Error::shape(format!(
            "pixel gradient shape {:?}, expected [{h}, {w}, 3]",
            pixel_loss_gradient.shape()
        )));
    }
    let (projected, frame) = project_splats(scene, camera)?;
    let bg = scene.background;
    let n_proj = projected.len();

    // Accumulate screen-space gradients per projected splat, row by row.
    let row_accums: Vec<Vec<PixelAccum>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let py = row as f64 + 0.5;
            let mut acc = vec![PixelAccum::default(); n_proj];
            let mut alphas = vec![0.0f64; n_proj];
            let mut trans = vec![0.0f64; n_proj];
            let mut gaussians = vec![0.0f64; n_proj];
            let mut clamped = vec![false; n_proj];
            let mut dvecs = vec![Vector2::zeros(); n_proj];
            for col in 0..w {
                let px = col as f64 + 0.5;
                let gpix = [
                    pixel_loss_gradient[(row, col, 0)],
                    pixel_loss_gradient[(row, col, 1)],
                    pixel_loss_gradient[(row, col, 2)],
                ];
                // Forward sweep, caching per-splat state.
                let mut transmittance = 1.0f64;
                for (k, p) in projected.iter().enumerate() {
                    let d = Vector2::new(px - p.center.x, py - p.center.y);
                    let power = 0.5 * (d.transpose() * p.conic * d)[(0, 0)];
                    let g = (-power).exp();
                    let raw = p.opacity * g;
                    let alpha = raw.clamp(0.0, ALPHA_MAX);
                    alphas[k] = alpha;
                    trans[k] = transmittance;
                    gaussians[k] = g;
                    clamped[k] = raw > ALPHA_MAX;
                    dvecs[k] = d;
                    transmittance *= 1.0 - alpha;
                }
                // Reverse sweep with the suffix trick.
                let mut suffix = [
                    bg[0] * transmittance,
                    bg[1] * transmittance,
                    bg[2] * transmittance,
                ];
                for k in (0..n_proj).rev() {
                    let p = &projected[k];
                    let (alpha, t_here, g) = (alphas[k], trans[k], gaussians[k]);
                    let weight = alpha * t_here;
                    let mut d_alpha = 0.0;
                    for c in 0..3 {
                        acc[k].d_color[c] += gpix[c] * weight;
                        d_alpha += gpix[c] * (p.color[c] * t_here - suffix[c] / (1.0 - alpha));
                        suffix[c] += p.color[c] * weight;
                    }
                    if !clamped[k] {
                        acc[k].d_opacity += d_alpha * g;
                        let d_g = d_alpha * p.opacity;
                        // dG/dd = -G * conic * d ; center enters as d = pix - center.
                        let md = p.conic * dvecs[k];
                        let coeff = d_g * g;
                        acc[k].d_center[0] += coeff * md.x;
                        acc[k].d_center[1] += coeff * md.y;
                        // dG/dconic = -0.5 * G * d d^T (symmetric).
                        acc[k].d_conic[0] += -0.5 * coeff * dvecs[k].x * dvecs[k].x;
                        acc[k].d_conic[1] += -0.5 * coeff * dvecs[k].x * dvecs[k].y;
                        acc[k].d_conic[2] += -0.5 * coeff * dvecs[k].y * dvecs[k].y;
                    }
                }
            }
            acc
        })
        .collect();

    // Deterministic reduction in row order.
    let mut accum = vec![PixelAccum::default(); n_proj];
    for row in row_accums {
        for (k, a) in row.into_iter().enumerate() {
            accum[k].d_center[0] += a.d_center[0];
            accum[k].d_center[1] += a.d_center[1];
            accum[k].d_conic[0] += a.d_conic[0];
            accum[k].d_conic[1] += a.d_conic[1];
            accum[k].d_conic[2] += a.d_conic[2];
            accum[k].d_opacity += a.d_opacity;
            for c in 0..3 {
                accum[k].d_color[c] += a.d_color[c];
            }
        }
    }

    let mut grads = vec![SplatGradients::default(); scene.splats.len()];
    for (k, p) in projected.iter().enumerate() {
        let a = &accum[k];
        let out = &mut grads[p.index];
        out.color = a.d_color;
        out.opacity = a.d_opacity;

        // conic = sigma2^{-1}: dL/dSigma2 = -conic * dL/dconic * conic.
        let g_conic = Matrix2::new(a.d_conic[0], a.d_conic[1], a.d_conic[1], a.d_conic[2]);
        let g_sigma2 = -p.conic * g_conic * p.conic;

        // Sigma2 = J Sigma_cam J^T + eps I.
        let g_sigma_cam = p.jac.transpose() * g_sigma2 * p.jac;
        let g_jac = 2.0 * g_sigma2 * p.jac * p.sigma_cam;

        // Sigma_cam = W Sigma3 W^T.
        let g_sigma3 = frame.w_rot.transpose() * g_sigma_cam * frame.w_rot;

        // Sigma3 = R diag(scale^2) R^T.
        let m = p.rot.transpose() * g_sigma3 * p.rot;
        for i in 0..3 {
            out.scale[i] = 2.0 * p.scale[i] * m[(i, i)];
        }
        let dmat = Matrix3::from_diagonal(&Vector3::new(
            p.scale.x * p.scale.x,
            p.scale.y * p.scale.y,
            p.scale.z * p.scale.z,
        ));
        let g_rot = 2.0 * g_sigma3 * p.rot * dmat;
        let partials = quat_matrix_partials(&p.quat);
        let mut g_quat = [0.0f64; 4];
        for (qi, dr) in partials.iter().enumerate() {
            g_quat[qi] = g_rot.component_mul(dr).sum();
        }
        // Chain through normalization q -> q/|q| (stored quaternions are unit).
        let q = p.quat;
        let dot: f64 = (0..4).map(|i| q[i] * g_quat[i]).sum();
        for i in 0..4 {
            out.rotation[i] = g_quat[i] - q[i] * dot;
        }

        // Mean path: the projected center moved by dL/dcenter, and dG/dd picked
        // up the opposite sign, so dL/dmu = -dL/d(pix - mu) = accumulated value.
        let g_mu = Vector2::new(a.d_center[0], a.d_center[1]);
        let mut g_pcam = p.jac.transpose() * g_mu;

        // The Jacobian itself depends on the camera-space mean.
        let (x, y) = (p.p_cam.x, p.p_cam.y);
        let zp = p.depth;
        let (fx, fy) = (frame.fx, frame.fy);
        let z2 = zp * zp;
        let z3 = z2 * zp;
        g_pcam.x += g_jac[(0, 2)] * fx / z2;
        g_pcam.y += g_jac[(1, 2)] * (-fy / z2);
        g_pcam.z += g_jac[(0, 0)] * (fx / z2)
            + g_jac[(0, 2)] * (2.0 * fx * x / z3)
            + g_jac[(1, 1)] * (-fy / z2)
            + g_jac[(1, 2)] * (-2.0 * fy * y / z3);

        let g_pos = frame.w_rot.transpose() * g_pcam;
        out.position = [g_pos.x, g_pos.y, g_pos.z];
    }
    Ok(grads)
}
