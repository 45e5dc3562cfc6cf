//! CPU EWA splatting renderer with analytic gradients.
//!
//! Forward pass: every Gaussian is projected to a 2D splat (2x2 covariance
//! Σ' = J W Σ Wᵀ Jᵀ + 0.3·I), splats are composited front-to-back in view
//! depth order, and remaining transmittance multiplies the background.
//!
//! Backward pass: per-pixel gradients flow analytically into the color,
//! opacity-logit and position columns of the attribute matrix; scale and
//! rotation stay frozen (their columns are zero). The position gradient
//! includes both the motion of the projected center and the change of the
//! projected covariance through the Jacobian.
//!
//! Splats are evaluated out to the radius where their per-pixel weight drops
//! below 1e-12 instead of a fixed 3σ box: a hard cutoff at 3σ leaves a weight
//! jump of ~1e-2·opacity at the footprint edge, which is far too large for
//! finite-difference validation of the position gradient. The 1e-12 threshold
//! (≈7σ for typical opacities) makes the truncation invisible at f64 scale
//! while still bounding per-splat work.

use nalgebra::{DMatrix, Matrix2, Matrix2x3, Matrix3x2, Vector2, Vector3};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::gs::{sigmoid, GaussianCloud, ATTR_DIM, COL_OPACITY};
use crate::patchify::PatchAssignment;

/// Splat contributions below this per-pixel alpha are skipped.
const ALPHA_MIN: f64 = 1e-12;
/// Standard 3DGS alpha clamp.
const ALPHA_CLAMP: f64 = 0.99;
/// Low-pass added to the projected covariance (standard 3DGS practice).
const LOW_PASS: f64 = 0.3;
/// Splats closer than this view depth are culled.
const NEAR_PLANE: f64 = 0.01;
/// Patch cameras never move closer than this to the patch centroid.
const MIN_PATCH_CAM_DIST: f64 = 1.0;

/// Dense H x W x 3 image (row-major, RGB interleaved). Also serves as the
/// diffusion latent and as per-pixel gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(width: usize, height: usize) -> ImageTensor {
        ImageTensor {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> ImageTensor {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        ImageTensor {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, ix: usize, iy: usize) -> Vector3<f64> {
        let at = (iy * self.width + ix) * 3;
        Vector3::new(self.data[at], self.data[at + 1], self.data[at + 2])
    }

    pub fn set_pixel(&mut self, ix: usize, iy: usize, rgb: Vector3<f64>) {
        let at = (iy * self.width + ix) * 3;
        self.data[at] = rgb.x;
        self.data[at + 1] = rgb.y;
        self.data[at + 2] = rgb.z;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// self + s * other (shapes must match).
    pub fn add_scaled(&self, other: &ImageTensor, s: f64) -> ImageTensor {
        assert!(self.same_shape(other), "image shape mismatch");
        ImageTensor {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &ImageTensor) -> ImageTensor {
        assert!(self.same_shape(other), "image shape mismatch");
        ImageTensor {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> ImageTensor {
        self.map(|v| v * s)
    }

    /// Mean of elementwise squares.
    pub fn mean_square(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    /// Mean absolute difference against another tensor.
    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert!(self.same_shape(other), "image shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Rendered RGB image plus accumulated per-pixel opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub rgb: ImageTensor,
    /// 1 - transmittance, row-major H x W.
    pub alpha: Vec<f64>,
}

/// M x 14 gradient matrix aligned with the attribute layout; frozen columns
/// (log scale, rotation) are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeGradients(pub DMatrix<f64>);

/// One projected (visible) Gaussian with everything the per-pixel loops need.
struct Splat {
    cloud_idx: usize,
    depth: f64,
    opacity: f64,
    color: Vector3<f64>,
    /// Projected center in pixel coordinates.
    center: Vector2<f64>,
    /// Inverse of the 2x2 projected covariance.
    cov_inv: Matrix2<f64>,
    /// d(center)/d(camera-space position) — also the projection Jacobian.
    jac: Matrix2x3<f64>,
    /// Σ_cam · Jᵀ, reused by the covariance part of the position gradient.
    sigma_cam_jt: Matrix3x2<f64>,
    /// Camera-space center.
    t: Vector3<f64>,
    /// Skip pixels with log-weight below this (alpha < ALPHA_MIN).
    power_cut: f64,
    /// Inclusive pixel bounds (x0, x1, y0, y1); guaranteed non-empty.
    bbox: (usize, usize, usize, usize),
}

impl Splat {
    /// Visit every pixel of the footprint in row-major order with the
    /// splat's local offset `d`, Gaussian weight, clamped alpha, and clamp flag.
    fn visit_pixels(&self, mut f: impl FnMut(usize, usize, Vector2<f64>, f64, f64, bool)) {
        let (x0, x1, y0, y1) = self.bbox;
        let a = self.cov_inv[(0, 0)];
        let b = self.cov_inv[(0, 1)];
        let c = self.cov_inv[(1, 1)];
        for iy in y0..=y1 {
            let dy = (iy as f64 + 0.5) - self.center.y;
            for ix in x0..=x1 {
                let dx = (ix as f64 + 0.5) - self.center.x;
                let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
                if power < self.power_cut {
                    continue;
                }
                let gauss = power.exp();
                let alpha_raw = self.opacity * gauss;
                let clamped = alpha_raw > ALPHA_CLAMP;
                let alpha = if clamped { ALPHA_CLAMP } else { alpha_raw };
                f(ix, iy, Vector2::new(dx, dy), gauss, alpha, clamped);
            }
        }
    }
}

/// Project all visible Gaussians and sort front-to-back (ties by cloud index).
fn project_splats(cloud: &GaussianCloud, pose: &CameraPose) -> Result<Vec<Splat>> {
    pose.validate()?;
    let basis = pose.view_basis();
    let focal = pose.focal();
    let (cx, cy) = pose.principal_point();
    let (w, h) = (pose.width, pose.height);

    let mut splats = Vec::new();
    for (idx, g) in cloud.gaussians.iter().enumerate() {
        let t = basis * (g.position - pose.eye);
        if t.z <= NEAR_PLANE {
            continue;
        }
        let opacity = sigmoid(g.opacity_logit);
        if opacity <= ALPHA_MIN {
            continue;
        }
        let (tx, ty, tz) = (t.x, t.y, t.z);
        let center = Vector2::new(cx + focal * tx / tz, cy - focal * ty / tz);

        // d(center)/dt; the v row carries the image-space y flip.
        let jac = Matrix2x3::new(
            focal / tz,
            0.0,
            -focal * tx / (tz * tz),
            0.0,
            -focal / tz,
            focal * ty / (tz * tz),
        );
        let sigma_cam = basis * g.covariance()? * basis.transpose();
        let mut cov2 = jac * sigma_cam * jac.transpose();
        cov2[(0, 0)] += LOW_PASS;
        cov2[(1, 1)] += LOW_PASS;
        let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
        if !det.is_finite() || det <= 0.0 {
            return Err(Error::Numerical(format!(
                "projected covariance of Gaussian {idx} is degenerate (det = {det})"
            )));
        }
        let cov_inv = Matrix2::new(
            cov2[(1, 1)] / det,
            -cov2[(0, 1)] / det,
            -cov2[(1, 0)] / det,
            cov2[(0, 0)] / det,
        );

        // Footprint: where opacity * exp(power) >= ALPHA_MIN.
        let power_cut = (ALPHA_MIN / opacity).ln();
        let mahal_sq = -2.0 * power_cut;
        if mahal_sq <= 0.0 {
            continue;
        }
        let half_trace = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
        let disc = (0.5 * (cov2[(0, 0)] - cov2[(1, 1)])).powi(2) + cov2[(0, 1)].powi(2);
        let lambda_max = half_trace + disc.sqrt();
        let radius = (mahal_sq * lambda_max).sqrt();

        let x0 = (center.x - radius - 0.5).ceil().max(0.0) as i64;
        let x1 = (center.x + radius - 0.5).floor().min(w as f64 - 1.0) as i64;
        let y0 = (center.y - radius - 0.5).ceil().max(0.0) as i64;
        let y1 = (center.y + radius - 0.5).floor().min(h as f64 - 1.0) as i64;
        if x0 > x1 || y0 > y1 || x1 < 0 || y1 < 0 {
            continue;
        }

        splats.push(Splat {
            cloud_idx: idx,
            depth: tz,
            opacity,
            color: g.color,
            center,
            cov_inv,
            jac,
            sigma_cam_jt: sigma_cam * jac.transpose(),
            t,
            power_cut,
            bbox: (x0 as usize, x1 as usize, y0 as usize, y1 as usize),
        });
    }
    splats.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.cloud_idx.cmp(&b.cloud_idx))
    });
    Ok(splats)
}

/// Render the cloud from `pose` over a constant background color.
///
/// An empty cloud yields the pure background. Deterministic: splats composite
/// in exact depth order (ties by cloud index) and pixels are visited row-major.
pub fn render(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    background: [f64; 3],
) -> Result<RenderedImage> {
    if background.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("background color must be finite".into()));
    }
    let splats = project_splats(cloud, pose)?;
    let (w, h) = (pose.width, pose.height);
    let mut color_acc = ImageTensor::zeros(w, h);
    let mut transmittance = vec![1.0f64; w * h];

    for splat in &splats {
        splat.visit_pixels(|ix, iy, _d, _gauss, alpha, _clamped| {
            let px = iy * w + ix;
            let t = transmittance[px];
            let at = px * 3;
            color_acc.data[at] += t * alpha * splat.color.x;
            color_acc.data[at + 1] += t * alpha * splat.color.y;
            color_acc.data[at + 2] += t * alpha * splat.color.z;
            transmittance[px] *= 1.0 - alpha;
        });
    }

    let mut alpha_out = vec![0.0f64; w * h];
    for px in 0..w * h {
        let t = transmittance[px];
        let at = px * 3;
        color_acc.data[at] += t * background[0];
        color_acc.data[at + 1] += t * background[1];
        color_acc.data[at + 2] += t * background[2];
        alpha_out[px] = 1.0 - t;
    }
    Ok(RenderedImage {
        rgb: color_acc,
        alpha: alpha_out,
    })
}

/// Reverse-mode propagation of per-pixel RGB gradients into attribute space.
///
/// Returns an M x 14 matrix with analytic gradients in the color,
/// opacity-logit and position columns; log-scale and rotation columns are
/// zero (frozen). `background` must match the forward render: the opacity and
/// position gradients include the transmittance path through the background
/// term.
pub fn backprop(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    pixel_grad: &ImageTensor,
    background: [f64; 3],
) -> Result<AttributeGradients> {
    if pixel_grad.width != pose.width || pixel_grad.height != pose.height {
        return Err(Error::Config(format!(
            "pixel_grad is {}x{} but the pose renders {}x{}",
            pixel_grad.width, pixel_grad.height, pose.width, pose.height
        )));
    }
    if !pixel_grad.is_finite() {
        return Err(Error::Numerical(
            "pixel_grad contains non-finite values".into(),
        ));
    }
    let splats = project_splats(cloud, pose)?;
    let (w, h) = (pose.width, pose.height);
    let bg = Vector3::new(background[0], background[1], background[2]);
    let basis_t = pose.view_basis().transpose();
    let focal = pose.focal();

    // Depth-ordered per-pixel contribution lists from a forward replay.
    let mut hits: Vec<Vec<(u32, f64)>> = vec![Vec::new(); w * h];
    for (slot, splat) in splats.iter().enumerate() {
        splat.visit_pixels(|ix, iy, _d, _gauss, alpha, _clamped| {
            hits[iy * w + ix].push((slot as u32, alpha));
        });
    }

    let mut grads = DMatrix::zeros(cloud.len(), ATTR_DIM);
    let mut prefix_t: Vec<f64> = Vec::new();
    for iy in 0..h {
        for ix in 0..w {
            let px = iy * w + ix;
            let list = &hits[px];
            if list.is_empty() {
                continue;
            }
            let g_px = pixel_grad.pixel(ix, iy);

            // Transmittance in front of each contribution.
            prefix_t.clear();
            let mut t = 1.0;
            for &(_, alpha) in list {
                prefix_t.push(t);
                t *= 1.0 - alpha;
            }
            // Suffix radiance S_i = Σ_{j>i} T_j α_j c_j + T_final · bg.
            let mut suffix = t * bg;

            for i in (0..list.len()).rev() {
                let (slot, alpha) = list[i];
                let splat = &splats[slot as usize];
                let t_i = prefix_t[i];
                let row = splat.cloud_idx;

                // Color: ∂C/∂c = T_i α_i per channel.
                let wgt = t_i * alpha;
                grads[(row, 11)] += g_px.x * wgt;
                grads[(row, 12)] += g_px.y * wgt;
                grads[(row, 13)] += g_px.z * wgt;

                // ∂C/∂α_i = T_i c_i − S_i / (1 − α_i).
                let dc_dalpha = t_i * splat.color - suffix / (1.0 - alpha);
                let dl_dalpha = g_px.dot(&dc_dalpha);

                // Recompute local geometry (identical arithmetic to the forward pass).
                let d = Vector2::new(
                    (ix as f64 + 0.5) - splat.center.x,
                    (iy as f64 + 0.5) - splat.center.y,
                );
                let a = splat.cov_inv[(0, 0)];
                let b = splat.cov_inv[(0, 1)];
                let c = splat.cov_inv[(1, 1)];
                let power = -0.5 * (a * d.x * d.x + 2.0 * b * d.x * d.y + c * d.y * d.y);
                let gauss = power.exp();
                let clamped = splat.opacity * gauss > ALPHA_CLAMP;

                if !clamped {
                    // Opacity via the logit: ∂α/∂logit = gauss · op(1−op).
                    let op = splat.opacity;
                    grads[(row, COL_OPACITY)] += dl_dalpha * gauss * op * (1.0 - op);

                    // Position. ∂α/∂power = α; power depends on the projected
                    // center (through d) and on Σ' (through J).
                    let dl_dpower = dl_dalpha * alpha;
                    let q = splat.cov_inv * d;
                    // Center path: ∂power/∂t = Jᵀ (A d).
                    let mut grad_t = splat.jac.transpose() * q;
                    // Covariance path: ∂power/∂t_k = qᵀ (∂J/∂t_k) (Σ_cam Jᵀ q).
                    let wv = splat.sigma_cam_jt * q;
                    let tz = splat.t.z;
                    let tz2 = tz * tz;
                    let f_tz2 = focal / tz2;
                    let two_f_tz3 = 2.0 * focal / (tz2 * tz);
                    grad_t.x += q.x * (-f_tz2) * wv.z;
                    grad_t.y += q.y * f_tz2 * wv.z;
                    grad_t.z += q.x * (-f_tz2 * wv.x + two_f_tz3 * splat.t.x * wv.z)
                        + q.y * (f_tz2 * wv.y - two_f_tz3 * splat.t.y * wv.z);
                    let grad_pos = basis_t * (grad_t * dl_dpower);
                    grads[(row, 0)] += grad_pos.x;
                    grads[(row, 1)] += grad_pos.y;
                    grads[(row, 2)] += grad_pos.z;
                }

                suffix += t_i * alpha * splat.color;
            }
        }
    }
    if grads.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::Numerical(
            "backprop produced non-finite gradients".into(),
        ));
    }
    Ok(AttributeGradients(grads))
}

/// Camera pose that frames one patch: target at the patch centroid, eye along
/// the direction of `base` at 3x the patch bounding radius (with a floor so
/// single-point patches remain visible). Intrinsics come from `base`.
pub fn patch_frame_pose(
    cloud: &GaussianCloud,
    assignment: &PatchAssignment,
    patch_id: usize,
    base: &CameraPose,
) -> Result<CameraPose> {
    assignment.check_cloud(cloud)?;
    let members = assignment.members(patch_id)?;
    let mut centroid = Vector3::zeros();
    for &m in &members {
        centroid += cloud.gaussians[m].position;
    }
    centroid /= members.len() as f64;
    let radius = members
        .iter()
        .map(|&m| (cloud.gaussians[m].position - centroid).norm())
        .fold(0.0, f64::max);

    let dir = base.eye - base.target;
    if dir.norm() < 1e-12 {
        return Err(Error::Config(
            "base pose has coincident eye and target".into(),
        ));
    }
    let dir = dir.normalize();
    let mut up = base.up;
    if dir.cross(&up).norm() < 1e-9 {
        up = Vector3::new(0.0, 1.0, 0.0);
        if dir.cross(&up).norm() < 1e-9 {
            up = Vector3::new(1.0, 0.0, 0.0);
        }
    }
    let pose = CameraPose {
        eye: centroid + dir * (3.0 * radius).max(MIN_PATCH_CAM_DIST),
        target: centroid,
        up,
        fov_y: base.fov_y,
        width: base.width,
        height: base.height,
    };
    pose.validate()?;
    Ok(pose)
}

/// Render a single patch with auto-framing (see [`patch_frame_pose`]).
pub fn render_patch(
    cloud: &GaussianCloud,
    assignment: &PatchAssignment,
    patch_id: usize,
    pose: &CameraPose,
    background: [f64; 3],
) -> Result<RenderedImage> {
    let framed = patch_frame_pose(cloud, assignment, patch_id, pose)?;
    let members = assignment.members(patch_id)?;
    let sub = GaussianCloud::new(
        members
            .iter()
            .map(|&m| cloud.gaussians[m].clone())
            .collect(),
    )?;
    render(&sub, &framed, background)
}

/// sRGB transfer function (linear -> encoded), both sides in [0, 1].
pub fn srgb_encode(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Inverse sRGB transfer function (encoded -> linear).
pub fn srgb_decode(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Export as 8-bit sRGB PNG with straight alpha.
pub fn export_png(image: &RenderedImage, path: &std::path::Path) -> Result<()> {
    let (w, h) = (image.rgb.width, image.rgb.height);
    let mut buf = image::RgbaImage::new(w as u32, h as u32);
    for iy in 0..h {
        for ix in 0..w {
            let rgb = image.rgb.pixel(ix, iy);
            let a = image.alpha[iy * w + ix].clamp(0.0, 1.0);
            let enc = |v: f64| (srgb_encode(v.clamp(0.0, 1.0)) * 255.0).round() as u8;
            buf.put_pixel(
                ix as u32,
                iy as u32,
                image::Rgba([
                    enc(rgb.x),
                    enc(rgb.y),
                    enc(rgb.z),
                    (a * 255.0).round() as u8,
                ]),
            );
        }
    }
    buf.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

/// Load an 8-bit sRGB PNG back into linear values.
pub fn load_png(path: &std::path::Path) -> Result<RenderedImage> {
    let img = image::open(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?
        .to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut rgb = ImageTensor::zeros(w, h);
    let mut alpha = vec![0.0; w * h];
    for iy in 0..h {
        for ix in 0..w {
            let p = img.get_pixel(ix as u32, iy as u32);
            rgb.set_pixel(
                ix,
                iy,
                Vector3::new(
                    srgb_decode(p[0] as f64 / 255.0),
                    srgb_decode(p[1] as f64 / 255.0),
                    srgb_decode(p[2] as f64 / 255.0),
                ),
            );
            alpha[iy * w + ix] = p[3] as f64 / 255.0;
        }
    }
    Ok(RenderedImage { rgb, alpha })
}
