//! Gaussian cloud representation.
//!
//! Each Gaussian stores position, opacity (as a logit, so additive updates can
//! never leave (0, 1) after the sigmoid), per-axis log scales, a unit
//! quaternion (w, x, y, z) and a degree-0 RGB color. A cloud can be flattened
//! to an M x 14 attribute matrix and rebuilt from one without loss; the
//! patch-level refiner works on that matrix layout.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of per-Gaussian attributes in the flattened layout.
pub const ATTR_DIM: usize = 14;
/// Column range of the position block.
pub const COL_POSITION: std::ops::Range<usize> = 0..3;
/// Column of the opacity logit.
pub const COL_OPACITY: usize = 3;
/// Column range of the log-scale block.
pub const COL_LOG_SCALE: std::ops::Range<usize> = 4..7;
/// Column range of the rotation quaternion (w, x, y, z).
pub const COL_ROTATION: std::ops::Range<usize> = 7..11;
/// Column range of the RGB color block.
pub const COL_COLOR: std::ops::Range<usize> = 11..14;

/// One anisotropic 3D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    /// Center in world units.
    pub position: Vector3<f64>,
    /// Opacity stored as a logit; effective opacity is `sigmoid(opacity_logit)`.
    pub opacity_logit: f64,
    /// Per-axis scales stored as logs for numerical stability.
    pub log_scale: Vector3<f64>,
    /// Unit quaternion (w, x, y, z).
    pub rotation: [f64; 4],
    /// Linear RGB in [0, 1].
    pub color: Vector3<f64>,
}

/// sigmoid(x) = 1 / (1 + e^-x)
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`]; input is clamped away from {0, 1}.
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

impl Gaussian {
    /// Effective opacity in (0, 1).
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    /// Rotation matrix of the (renormalized) quaternion.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
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

    /// World-space covariance Σ = R S Sᵀ Rᵀ with S = diag(exp(log_scale)).
    ///
    /// Errors on non-finite inputs (NaN scales would otherwise propagate
    /// silently into the renderer).
    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        if !self.is_finite() {
            return Err(Error::Numerical(
                "covariance requested for a Gaussian with non-finite attributes".into(),
            ));
        }
        let r = self.rotation_matrix();
        let s = self.log_scale.map(f64::exp);
        // R S (R S)^T, with S diagonal folded into the columns of R.
        let rs = Matrix3::from_columns(&[r.column(0) * s.x, r.column(1) * s.y, r.column(2) * s.z]);
        Ok(rs * rs.transpose())
    }

    /// Renormalize the quaternion; falls back to identity if the norm underflows.
    pub fn normalize_rotation(&mut self) {
        let [w, x, y, z] = self.rotation;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n < 1e-12 {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        } else {
            self.rotation = [w / n, x / n, y / n, z / n];
        }
    }

    /// Flatten to the 14-entry attribute row
    /// [position, opacity_logit, log_scale, rotation, color].
    pub fn attributes(&self) -> [f64; ATTR_DIM] {
        [
            self.position.x,
            self.position.y,
            self.position.z,
            self.opacity_logit,
            self.log_scale.x,
            self.log_scale.y,
            self.log_scale.z,
            self.rotation[0],
            self.rotation[1],
            self.rotation[2],
            self.rotation[3],
            self.color.x,
            self.color.y,
            self.color.z,
        ]
    }

    /// Rebuild from an attribute row; exact inverse of [`Gaussian::attributes`].
    pub fn from_attributes(row: &[f64]) -> Result<Gaussian> {
        if row.len() != ATTR_DIM {
            return Err(Error::Config(format!(
                "attribute row must have {ATTR_DIM} entries, got {}",
                row.len()
            )));
        }
        Ok(Gaussian {
            position: Vector3::new(row[0], row[1], row[2]),
            opacity_logit: row[3],
            log_scale: Vector3::new(row[4], row[5], row[6]),
            rotation: [row[7], row[8], row[9], row[10]],
            color: Vector3::new(row[11], row[12], row[13]),
        })
    }

    fn is_finite(&self) -> bool {
        self.attributes().iter().all(|v| v.is_finite())
    }
}

/// An ordered collection of Gaussians plus a cached bounding radius
/// (max distance of any center from the origin; used for default camera framing).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub bounding_radius: f64,
}

impl GaussianCloud {
    /// Build a cloud, validating attribute finiteness.
    ///
    /// An empty cloud is a legal value (it renders as pure background); the
    /// pipeline entry points and PLY persistence enforce M >= 1 themselves.
    pub fn new(gaussians: Vec<Gaussian>) -> Result<GaussianCloud> {
        for (i, g) in gaussians.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "Gaussian {i} has non-finite attributes"
                )));
            }
        }
        let mut cloud = GaussianCloud {
            gaussians,
            bounding_radius: 0.0,
        };
        cloud.recompute_bounding_radius();
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Positions of all Gaussians, in cloud order.
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    /// Refresh the cached bounding radius after in-place edits.
    pub fn recompute_bounding_radius(&mut self) {
        self.bounding_radius = self
            .gaussians
            .iter()
            .map(|g| g.position.norm())
            .fold(0.0, f64::max);
    }

    /// Flatten to the M x 14 attribute matrix.
    pub fn to_attribute_matrix(&self) -> DMatrix<f64> {
        let m = self.len();
        let mut out = DMatrix::zeros(m, ATTR_DIM);
        for (i, g) in self.gaussians.iter().enumerate() {
            let row = g.attributes();
            for (j, v) in row.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        out
    }

    /// Rebuild a cloud from an M x 14 attribute matrix (exact round trip).
    pub fn from_attribute_matrix(attrs: &DMatrix<f64>) -> Result<GaussianCloud> {
        if attrs.ncols() != ATTR_DIM {
            return Err(Error::Config(format!(
                "attribute matrix must have {ATTR_DIM} columns, got {}",
                attrs.ncols()
            )));
        }
        let mut gaussians = Vec::with_capacity(attrs.nrows());
        for i in 0..attrs.nrows() {
            let row: Vec<f64> = attrs.row(i).iter().copied().collect();
            gaussians.push(Gaussian::from_attributes(&row)?);
        }
        GaussianCloud::new(gaussians)
    }
}

/// Synthetic cloud shapes for tests and smoke runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthShape {
    /// Uniform ball of the given radius centered at the origin.
    Sphere { radius: f64 },
    /// Uniform box with the given half extents centered at the origin.
    Box { half_extents: [f64; 3] },
    /// Two uniform balls centered at (-separation, 0, 0) and (+separation, 0, 0).
    /// The first ceil(M/2) Gaussians belong to the -x blob and are tinted red;
    /// the rest belong to the +x blob and are tinted blue, so patch-level color
    /// statistics have a known ground truth.
    TwoBlobs { separation: f64, radius: f64 },
}

impl SynthShape {
    /// Radius used to choose the initial splat scale.
    fn characteristic_radius(&self) -> f64 {
        match self {
            SynthShape::Sphere { radius } => *radius,
            SynthShape::Box { half_extents } => {
                (half_extents[0] + half_extents[1] + half_extents[2]) / 3.0
            }
            SynthShape::TwoBlobs { radius, .. } => *radius,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            SynthShape::Sphere { radius } => *radius > 0.0 && radius.is_finite(),
            SynthShape::Box { half_extents } => {
                half_extents.iter().all(|h| *h > 0.0 && h.is_finite())
            }
            SynthShape::TwoBlobs { separation, radius } => {
                *separation > 0.0 && *radius > 0.0 && separation.is_finite() && radius.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synth shape: {self:?}")))
        }
    }
}

/// Rejection-sample a point uniformly inside the unit ball.
fn sample_unit_ball(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v;
        }
    }
}

/// Deterministic synthetic cloud: positions uniform in `shape`, colors random
/// in [0, 1] (fixed per-blob tints for [`SynthShape::TwoBlobs`]), opacity
/// sigmoid⁻¹(0.1), isotropic scales sized so neighboring splats overlap,
/// identity rotations.
pub fn synth_init(shape: SynthShape, m: usize, seed: u64) -> Result<GaussianCloud> {
    shape.validate()?;
    if m == 0 {
        return Err(Error::Config(
            "M >= 1 required: synth_init got M = 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opacity_logit = inverse_sigmoid(0.1);
    // Mean inter-point spacing in a ball scales like radius * M^(-1/3); the
    // (4π/3)^(1/3) ≈ 1.61 factor makes neighboring splats overlap slightly.
    let scale = 1.61 * shape.characteristic_radius() / (m as f64).cbrt();
    let log_scale = Vector3::from_element(scale.ln());

    let mut gaussians = Vec::with_capacity(m);
    for i in 0..m {
        let (position, color) = match shape {
            SynthShape::Sphere { radius } => {
                let p = sample_unit_ball(&mut rng) * radius;
                let c = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
                (p, c)
            }
            SynthShape::Box { half_extents } => {
                let p = Vector3::new(
                    rng.gen_range(-half_extents[0]..=half_extents[0]),
                    rng.gen_range(-half_extents[1]..=half_extents[1]),
                    rng.gen_range(-half_extents[2]..=half_extents[2]),
                );
                let c = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
                (p, c)
            }
            SynthShape::TwoBlobs { separation, radius } => {
                let first_blob = i < m.div_ceil(2);
                let center = if first_blob {
                    Vector3::new(-separation, 0.0, 0.0)
                } else {
                    Vector3::new(separation, 0.0, 0.0)
                };
                let color = if first_blob {
                    Vector3::new(0.8, 0.1, 0.1)
                } else {
                    Vector3::new(0.1, 0.1, 0.8)
                };
                (center + sample_unit_ball(&mut rng) * radius, color)
            }
        };
        gaussians.push(Gaussian {
            position,
            opacity_logit,
            log_scale,
            rotation: [1.0, 0.0, 0.0, 0.0],
            color,
        });
    }
    GaussianCloud::new(gaussians)
}
