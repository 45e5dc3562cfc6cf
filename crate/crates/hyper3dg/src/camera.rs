//! Camera poses and randomized view sampling.
//!
//! World space is y-up and right-handed. A pose looks from `eye` toward
//! `target`; camera space has x right, y up, and z pointing into the scene,
//! so visible points have positive view depth. Pixels are sampled at cell
//! centers: pixel (ix, iy) maps to image-plane coordinates (ix+0.5, iy+0.5)
//! with the principal point at (width/2, height/2).

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Field of view and image size shared by a batch of sampled poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

/// A camera pose plus intrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub eye: Vector3<f64>,
    pub target: Vector3<f64>,
    pub up: Vector3<f64>,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y.is_finite() && self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::Config(format!(
                "fov_y must lie in (0, pi), got {}",
                self.fov_y
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be at least 1x1".into()));
        }
        let view = self.target - self.eye;
        if view.norm() < 1e-12 {
            return Err(Error::Config("eye and target coincide".into()));
        }
        if view.normalize().cross(&self.up).norm() < 1e-9 {
            return Err(Error::Config(
                "up vector is parallel to the view direction".into(),
            ));
        }
        if !(self.eye.iter().all(|v| v.is_finite())
            && self.target.iter().all(|v| v.is_finite())
            && self.up.iter().all(|v| v.is_finite()))
        {
            return Err(Error::Config("pose contains non-finite values".into()));
        }
        Ok(())
    }

    /// World-to-camera rotation; rows are (right, up, forward).
    /// Camera coordinates of a world point p are `basis * (p - eye)`.
    pub fn view_basis(&self) -> Matrix3<f64> {
        let forward = (self.target - self.eye).normalize();
        let right = forward.cross(&self.up).normalize();
        let up = right.cross(&forward);
        Matrix3::from_rows(&[right.transpose(), up.transpose(), forward.transpose()])
    }

    /// Vertical focal length in pixels; horizontal equals vertical (square pixels).
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y).tan()
    }

    /// Principal point (image center).
    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }
}

/// Maximum elevation (radians) for sampled poses; the band avoids the poles
/// where the fixed (0, 1, 0) up vector would degenerate.
const MAX_ELEVATION: f64 = std::f64::consts::PI / 3.0; // 60 degrees

/// Sample `n` poses looking at the origin from a sphere of the given radius.
///
/// Azimuth is uniform in [0, 2π); elevation is distributed as on the uniform
/// sphere restricted to the ±60° band (uniform in its sine). Deterministic in
/// `seed`.
pub fn sample_poses(
    n: usize,
    radius: f64,
    seed: u64,
    lens: &CameraIntrinsics,
) -> Result<Vec<CameraPose>> {
    if n == 0 {
        return Err(Error::Config("pose count must be at least 1".into()));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::Config(format!(
            "camera radius must be positive, got {radius}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sin_band = MAX_ELEVATION.sin();
    let mut poses = Vec::with_capacity(n);
    for _ in 0..n {
        let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
        let elevation = rng.gen_range(-sin_band..=sin_band).asin();
        let eye = radius
            * Vector3::new(
                elevation.cos() * azimuth.cos(),
                elevation.sin(),
                elevation.cos() * azimuth.sin(),
            );
        let pose = CameraPose {
            eye,
            target: Vector3::zeros(),
            up: Vector3::new(0.0, 1.0, 0.0),
            fov_y: lens.fov_y,
            width: lens.width,
            height: lens.height,
        };
        pose.validate()?;
        poses.push(pose);
    }
    Ok(poses)
}
