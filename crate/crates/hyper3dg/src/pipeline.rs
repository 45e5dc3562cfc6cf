//! End-to-end optimization loop: diffusion-guided warm-up, then interleaved
//! hypergraph refinement blocks.
//!
//! The loop alternates two moves. `ddim_update` renders the cloud from fresh
//! camera poses, evaluates the interval-score loss, back-propagates the pixel
//! gradient to Gaussian attributes, and applies one Adam step to the
//! differentiable columns (position, opacity, color; scale and rotation stay
//! frozen). `hg_refine_step` clusters the cloud into patches, builds patch
//! descriptors from attribute means and rendered-appearance features, smooths
//! them with one hypergraph (or graph-baseline) convolution, and adds the
//! per-patch increment back to every member Gaussian. Hypergraph structure is
//! rebuilt once per refinement block and reused for the remaining steps of
//! the block; the diagonal transform Θ learns through the same Adam step as
//! the attributes, via the chain rule of the replication path.
//!
//! Reproducibility contract: all guidance randomness (poses, timestep draws)
//! flows from one seeded generator, while refinement uses fixed seeds derived
//! from the config seed — so a run with `refine_damping = 0` is bitwise
//! identical to a warm-up-only run of the same length.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{sample_poses, CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::featurize::{extract, standardize_columns, ExtractorSpec, FEATURE_BACKGROUND};
use crate::gs::{
    synth_init, GaussianCloud, SynthShape, ATTR_DIM, COL_COLOR, COL_OPACITY, COL_POSITION,
};
use crate::guidance::{ism_grad, schedule_linear, DiffusionSchedule, IsmConfig, NoisePredictor};
use crate::hypergraph::{
    build_knn_hypergraph, concat_hypergraphs, dense_forward_with_cache, gcn_operator,
    hgnn_forward_with_cache, leaky_relu_grad, HgnnCache, Hypergraph, HypergraphGroup, ThetaDiag,
    VertexMatrix,
};
use crate::patchify::{kmeans, patch_means, PatchAssignment};
use crate::ply::{load_ply, save_ply};
use crate::render::{backprop, patch_frame_pose, render, render_patch};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-15;
/// Epsilon for feature-column standardization.
const STANDARDIZE_EPSILON: f64 = 1e-8;
/// Convergence window length (iterations) for the moving-average plateau rule.
const CONVERGENCE_WINDOW: usize = 100;
/// Minimum relative improvement between consecutive windows to count as progress.
const CONVERGENCE_RELATIVE_DROP: f64 = 1e-3;
/// Number of consecutive stagnant windows that ends the run.
const CONVERGENCE_PATIENCE: usize = 3;

/// Everything a full run needs; JSON documents with exactly these field names
/// deserialize into it, and omitted fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed: guidance randomness derives from it directly, refinement
    /// internals (patchify, feature poses) through fixed salts.
    pub seed: u64,
    /// Warm-up iterations before the first refinement block.
    pub n0: usize,
    /// Iterations per refinement block (structure is rebuilt at block start).
    pub n1: usize,
    /// Number of patches for K-Means.
    pub k_pat: usize,
    /// Spatial KNN neighbor count (over patch centroids).
    pub k_spa: usize,
    /// Latent KNN neighbor count (over standardized patch features).
    pub k_lat: usize,
    /// Adam learning rates per attribute group.
    pub position_lr: f64,
    pub color_lr: f64,
    pub opacity_lr: f64,
    /// Adam learning rate for the diagonal transform Θ.
    pub theta_lr: f64,
    /// Hard cap on total iterations (warm-up + refine-block iterations).
    pub total_iterations: usize,
    /// Camera poses sampled per `ddim_update` call.
    pub cm_count: usize,
    /// Scale of the refinement increment added to member Gaussians.
    pub refine_damping: f64,
    /// LeakyReLU slope of the convolution.
    pub leaky_slope: f64,
    /// Use the clique-expansion graph convolution instead of the hypergraph.
    pub use_gcn: bool,
    /// Edge weights for the spatial / latent blocks of the concatenation.
    pub w_spa: f64,
    pub w_lat: f64,
    /// Base poses per patch for appearance features.
    pub feature_views: usize,
    /// Lloyd iteration cap for patchify.
    pub kmeans_max_iter: usize,
    /// Camera sphere radius, image size, and vertical field of view.
    pub camera_radius: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub fov_y: f64,
    /// Composite background; also the diffusion latent for empty pixels.
    pub background: [f64; 3],
    /// Diffusion schedule parameters.
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ism: IsmConfig,
    pub extractor: ExtractorSpec,
    /// Where `optimize` writes the final cloud.
    pub output_ply: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            n0: 1000,
            n1: 50,
            k_pat: 50,
            k_spa: 13,
            k_lat: 13,
            position_lr: 1.6e-6,
            color_lr: 2.5e-3,
            opacity_lr: 5e-2,
            theta_lr: 1e-3,
            total_iterations: 4000,
            cm_count: 4,
            refine_damping: 1.0,
            leaky_slope: 0.01,
            use_gcn: false,
            w_spa: 1.0,
            w_lat: 1.0,
            feature_views: 2,
            kmeans_max_iter: 100,
            camera_radius: 4.0,
            image_width: 64,
            image_height: 64,
            fov_y: 0.8,
            background: [0.0, 0.0, 0.0],
            t_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ism: IsmConfig::default(),
            extractor: ExtractorSpec::default(),
            output_ply: "hyper3dg.ply".to_string(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 {
            return Err(Error::Config("n1 must be at least 1".into()));
        }
        if self.k_pat == 0 {
            return Err(Error::Config("k_pat must be at least 1".into()));
        }
        for (k, name) in [(self.k_spa, "k_spa"), (self.k_lat, "k_lat")] {
            if k == 0 || k >= self.k_pat {
                return Err(Error::Config(format!(
                    "{name} = {k} must satisfy 1 <= {name} < k_pat = {}",
                    self.k_pat
                )));
            }
        }
        for (lr, name) in [
            (self.position_lr, "position_lr"),
            (self.color_lr, "color_lr"),
            (self.opacity_lr, "opacity_lr"),
            (self.theta_lr, "theta_lr"),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.total_iterations == 0 {
            return Err(Error::Config("total_iterations must be at least 1".into()));
        }
        if self.cm_count == 0 || self.feature_views == 0 {
            return Err(Error::Config(
                "cm_count and feature_views must be at least 1".into(),
            ));
        }
        if !(self.refine_damping.is_finite() && self.refine_damping >= 0.0) {
            return Err(Error::Config(format!(
                "refine_damping must be a non-negative finite real, got {}",
                self.refine_damping
            )));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope > 0.0 && self.leaky_slope <= 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in (0, 1], got {}",
                self.leaky_slope
            )));
        }
        for (w, name) in [(self.w_spa, "w_spa"), (self.w_lat, "w_lat")] {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {w}")));
            }
        }
        if self.kmeans_max_iter == 0 {
            return Err(Error::Config("kmeans_max_iter must be at least 1".into()));
        }
        if !(self.camera_radius.is_finite() && self.camera_radius > 0.0) {
            return Err(Error::Config(format!(
                "camera_radius must be positive, got {}",
                self.camera_radius
            )));
        }
        if self.image_width < 4 || self.image_height < 4 {
            return Err(Error::Config(format!(
                "image size {}x{} is too small to guide on",
                self.image_width, self.image_height
            )));
        }
        if !(self.fov_y.is_finite() && self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::Config(format!(
                "fov_y must lie in (0, pi), got {}",
                self.fov_y
            )));
        }
        if self.background.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!(
                "background must lie in [0, 1]^3, got {:?}",
                self.background
            )));
        }
        if self.output_ply.is_empty() {
            return Err(Error::Config("output_ply must not be empty".into()));
        }
        self.extractor.validate()?;
        // Schedule construction validates t_steps/betas; the ISM window is
        // checked against it.
        let schedule = schedule_linear(self.t_steps, self.beta_start, self.beta_end)?;
        self.ism.validate(&schedule)?;
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fov_y: self.fov_y,
            width: self.image_width,
            height: self.image_height,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        schedule_linear(self.t_steps, self.beta_start, self.beta_end)
    }

    /// Fixed K-Means seed: refinement must not consume guidance randomness.
    fn patchify_seed(&self) -> u64 {
        self.seed ^ 0x9E37_79B9_7F4A_7C15
    }

    /// Fixed seed for the feature-render base poses.
    fn feature_pose_seed(&self) -> u64 {
        self.seed ^ 0xD1B5_4A32_D192_ED03
    }
}

/// Accumulated wall-clock seconds per pipeline phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub patchify: f64,
    pub construction: f64,
    pub features: f64,
    pub hgnn: f64,
    pub render: f64,
    pub guidance: f64,
}

/// Outcome of a full [`optimize`] run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// Guidance loss per executed iteration.
    pub loss_trace: Vec<f64>,
    pub phase_seconds: PhaseTimes,
    pub final_cloud_path: String,
    /// Hypergraph/graph structure rebuilds (once per refinement block).
    pub structure_rebuilds: usize,
    /// Refine steps that reused the cached structure.
    pub structure_cache_hits: usize,
    /// True when the plateau rule stopped the run before the iteration cap.
    pub converged: bool,
}

/// Adam moments for the attribute matrix and for Θ, sharing one step counter
/// so Θ updates ride the same bias correction as the attribute updates.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m_attr: DMatrix<f64>,
    v_attr: DMatrix<f64>,
    m_theta: Vec<f64>,
    v_theta: Vec<f64>,
    step: usize,
}

impl OptimizerState {
    pub fn new(gaussian_count: usize) -> OptimizerState {
        OptimizerState {
            m_attr: DMatrix::zeros(gaussian_count, ATTR_DIM),
            v_attr: DMatrix::zeros(gaussian_count, ATTR_DIM),
            m_theta: Vec::new(),
            v_theta: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn column_lr(config: &PipelineConfig, col: usize) -> f64 {
        if COL_POSITION.contains(&col) {
            config.position_lr
        } else if col == COL_OPACITY {
            config.opacity_lr
        } else if COL_COLOR.contains(&col) {
            config.color_lr
        } else {
            0.0 // log-scale and rotation columns stay frozen
        }
    }

    /// One Adam step on the differentiable attribute columns. Frozen columns
    /// receive exactly zero update; color columns are projected back onto
    /// [0, 1] so renders remain valid diffusion latents.
    pub fn apply_attr_step(
        &mut self,
        attrs: &mut DMatrix<f64>,
        grads: &DMatrix<f64>,
        config: &PipelineConfig,
    ) -> Result<()> {
        if attrs.shape() != self.m_attr.shape() || grads.shape() != attrs.shape() {
            return Err(Error::Config(format!(
                "optimizer holds moments for {:?} but got attrs {:?} and grads {:?}",
                self.m_attr.shape(),
                attrs.shape(),
                grads.shape()
            )));
        }
        self.step += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for col in 0..ATTR_DIM {
            let lr = Self::column_lr(config, col);
            if lr == 0.0 {
                continue;
            }
            for row in 0..attrs.nrows() {
                let g = grads[(row, col)];
                let m = ADAM_BETA1 * self.m_attr[(row, col)] + (1.0 - ADAM_BETA1) * g;
                let v = ADAM_BETA2 * self.v_attr[(row, col)] + (1.0 - ADAM_BETA2) * g * g;
                self.m_attr[(row, col)] = m;
                self.v_attr[(row, col)] = v;
                attrs[(row, col)] -= lr * (m / bias1) / ((v / bias2).sqrt() + ADAM_EPSILON);
                if COL_COLOR.contains(&col) {
                    attrs[(row, col)] = attrs[(row, col)].clamp(0.0, 1.0);
                }
            }
        }
        Ok(())
    }

    /// Adam step for Θ using the shared step counter (no extra increment).
    pub fn apply_theta_step(&mut self, theta: &mut ThetaDiag, grad: &[f64], lr: f64) -> Result<()> {
        if theta.len() != grad.len() {
            return Err(Error::Config(format!(
                "theta has {} entries but the gradient has {}",
                theta.len(),
                grad.len()
            )));
        }
        if self.m_theta.is_empty() {
            self.m_theta = vec![0.0; grad.len()];
            self.v_theta = vec![0.0; grad.len()];
        }
        if self.m_theta.len() != grad.len() {
            return Err(Error::Config(format!(
                "optimizer holds theta moments of length {} but got {}",
                self.m_theta.len(),
                grad.len()
            )));
        }
        let t = self.step.max(1);
        let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for (k, &g) in grad.iter().enumerate() {
            let m = ADAM_BETA1 * self.m_theta[k] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.v_theta[k] + (1.0 - ADAM_BETA2) * g * g;
            self.m_theta[k] = m;
            self.v_theta[k] = v;
            theta.0[k] -= lr * (m / bias1) / ((v / bias2).sqrt() + ADAM_EPSILON);
        }
        Ok(())
    }
}

/// Cached convolution structure for one refinement block.
#[derive(Debug, Clone)]
pub enum RefineOperator {
    Hyper(Hypergraph),
    Dense(DMatrix<f64>),
}

/// Block-scoped structure cache plus the per-step intermediates the Θ
/// gradient needs (patch assignment, vertex features, forward cache).
#[derive(Debug, Clone, Default)]
pub struct RefineCaches {
    pub operator: Option<RefineOperator>,
    pub assignment: Option<PatchAssignment>,
    pub x: Option<VertexMatrix>,
    pub forward: Option<HgnnCache>,
    pub structure_rebuilds: usize,
    pub structure_cache_hits: usize,
}

impl RefineCaches {
    pub fn new() -> RefineCaches {
        RefineCaches::default()
    }

    /// Drop the cached structure; the next refine step rebuilds it.
    pub fn invalidate_structure(&mut self) {
        self.operator = None;
    }
}

/// Result of one [`ddim_update`]: updated cloud, mean view loss, and the
/// averaged attribute gradient (kept for the Θ chain rule).
#[derive(Debug, Clone)]
pub struct DdimOutcome {
    pub cloud: GaussianCloud,
    pub loss: f64,
    pub attr_grads: DMatrix<f64>,
}

/// Result of one [`hg_refine_step`]: refined cloud and the damped per-Gaussian
/// increment that was added (identical rows for patch peers).
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub cloud: GaussianCloud,
    pub delta: DMatrix<f64>,
}

/// One diffusion-guided descent step over the given camera poses.
///
/// Views are rendered and reduced sequentially in pose order, so results are
/// deterministic. The timestep draws consume `rng` once per view.
#[allow(clippy::too_many_arguments)]
pub fn ddim_update(
    cloud: &GaussianCloud,
    y: Option<&str>,
    poses: &[CameraPose],
    predictor: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    config: &PipelineConfig,
    optimizer: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
    times: &mut PhaseTimes,
) -> Result<DdimOutcome> {
    if poses.is_empty() {
        return Err(Error::Config(
            "ddim_update needs at least one camera pose".into(),
        ));
    }
    let mut grad_sum = DMatrix::zeros(cloud.len(), ATTR_DIM);
    let mut loss_sum = 0.0;
    for pose in poses {
        let t0 = Instant::now();
        let image = render(cloud, pose, config.background)?;
        times.render += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let ism = ism_grad(&image, y, predictor, schedule, &config.ism, rng)?;
        times.guidance += t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let grads = backprop(cloud, pose, &ism.pixel_grad, config.background)?;
        times.render += t0.elapsed().as_secs_f64();

        grad_sum += grads.0;
        loss_sum += ism.loss;
    }
    let n = poses.len() as f64;
    let attr_grads = grad_sum.unscale(n);
    let loss = loss_sum / n;

    let mut attrs = cloud.to_attribute_matrix();
    optimizer.apply_attr_step(&mut attrs, &attr_grads, config)?;
    let updated = GaussianCloud::from_attribute_matrix(&attrs)?;
    Ok(DdimOutcome {
        cloud: updated,
        loss,
        attr_grads,
    })
}

/// One hypergraph refinement step.
///
/// Re-clusters the cloud, renders per-patch appearance, assembles vertex
/// features X = [attribute means ‖ standardized latent features], convolves
/// them through the cached (or freshly built) structure, and adds the damped
/// per-patch increment of the 14 attribute columns back to every member
/// Gaussian, renormalizing quaternions. Θ is created as the identity on
/// first use.
pub fn hg_refine_step(
    cloud: &GaussianCloud,
    caches: &mut RefineCaches,
    config: &PipelineConfig,
    theta: &mut Option<ThetaDiag>,
    times: &mut PhaseTimes,
) -> Result<RefineOutcome> {
    if cloud.is_empty() {
        return Err(Error::Config(
            "hg_refine_step needs a non-empty cloud".into(),
        ));
    }
    let attrs = cloud.to_attribute_matrix();

    let t0 = Instant::now();
    let assignment = kmeans(
        &cloud.positions(),
        config.k_pat,
        config.patchify_seed(),
        config.kmeans_max_iter,
    )?;
    times.patchify += t0.elapsed().as_secs_f64();

    // Per-patch appearance renders from fixed base poses, re-framed onto each
    // patch so every patch fills its images comparably.
    let t0 = Instant::now();
    let lens = config.intrinsics();
    let base_poses = sample_poses(
        config.feature_views,
        config.camera_radius,
        config.feature_pose_seed(),
        &lens,
    )?;
    let mut images = Vec::with_capacity(assignment.k());
    for patch in 0..assignment.k() {
        let mut views = Vec::with_capacity(base_poses.len());
        for base in &base_poses {
            let framed = patch_frame_pose(cloud, &assignment, patch, base)?;
            views.push(render_patch(
                cloud,
                &assignment,
                patch,
                &framed,
                FEATURE_BACKGROUND,
            )?);
        }
        images.push(views);
    }
    times.render += t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let features = extract(&images, &config.extractor)?;
    let f_std = standardize_columns(&features.features, STANDARDIZE_EPSILON)?;
    let v_bar = patch_means(&attrs, &assignment)?;
    let k = assignment.k();
    let c_total = ATTR_DIM + f_std.ncols();
    let mut x = DMatrix::zeros(k, c_total);
    x.view_mut((0, 0), (k, ATTR_DIM)).copy_from(&v_bar);
    x.view_mut((0, ATTR_DIM), (k, f_std.ncols()))
        .copy_from(&f_std);
    times.features += t0.elapsed().as_secs_f64();

    if caches.operator.is_none() {
        let t0 = Instant::now();
        let mut centroids = DMatrix::zeros(k, 3);
        for (p, c) in assignment.centroids.iter().enumerate() {
            centroids[(p, 0)] = c.x;
            centroids[(p, 1)] = c.y;
            centroids[(p, 2)] = c.z;
        }
        let operator = if config.use_gcn {
            RefineOperator::Dense(gcn_operator(
                &centroids,
                &f_std,
                config.k_spa,
                config.k_lat,
            )?)
        } else {
            let h_spa = build_knn_hypergraph(&centroids, config.k_spa, HypergraphGroup::Spatial)?;
            let h_lat = build_knn_hypergraph(&f_std, config.k_lat, HypergraphGroup::Latent)?;
            RefineOperator::Hyper(concat_hypergraphs(
                &h_spa,
                &h_lat,
                config.w_spa,
                config.w_lat,
            )?)
        };
        caches.operator = Some(operator);
        caches.structure_rebuilds += 1;
        times.construction += t0.elapsed().as_secs_f64();
    } else {
        caches.structure_cache_hits += 1;
    }

    let operator = caches.operator.as_ref().expect("structure built above");
    let op_vertices = match operator {
        RefineOperator::Hyper(h) => h.n_vertices,
        RefineOperator::Dense(a) => a.nrows(),
    };
    if op_vertices != k {
        return Err(Error::Config(format!(
            "cached structure covers {op_vertices} patches but patchify produced {k}"
        )));
    }

    let theta_ref = theta.get_or_insert_with(|| ThetaDiag::ones(c_total));
    if theta_ref.len() != c_total {
        return Err(Error::Config(format!(
            "theta has {} entries but vertex features have {c_total} columns",
            theta_ref.len()
        )));
    }

    let t0 = Instant::now();
    let (x_tilde, forward) = match operator {
        RefineOperator::Hyper(h) => hgnn_forward_with_cache(&x, h, theta_ref, config.leaky_slope)?,
        RefineOperator::Dense(a) => dense_forward_with_cache(&x, a, theta_ref, config.leaky_slope)?,
    };
    times.hgnn += t0.elapsed().as_secs_f64();

    // Recover: drop feature columns, replicate each patch's damped attribute
    // increment to all members.
    let m = cloud.len();
    let mut delta = DMatrix::zeros(m, ATTR_DIM);
    for (i, &p) in assignment.labels.iter().enumerate() {
        for col in 0..ATTR_DIM {
            delta[(i, col)] = config.refine_damping * (x_tilde[(p, col)] - x[(p, col)]);
        }
    }
    let refined = if config.refine_damping == 0.0 {
        cloud.clone()
    } else {
        let mut updated = &attrs + &delta;
        // Patch increments are additive and may overshoot the color box;
        // project back so renders stay valid diffusion latents (identical to
        // the optimizer's projection).
        for row in 0..m {
            for col in COL_COLOR {
                updated[(row, col)] = updated[(row, col)].clamp(0.0, 1.0);
            }
        }
        let mut next = GaussianCloud::from_attribute_matrix(&updated)?;
        for g in next.gaussians.iter_mut() {
            g.normalize_rotation();
        }
        next.recompute_bounding_radius();
        next
    };

    caches.assignment = Some(assignment);
    caches.x = Some(x);
    caches.forward = Some(forward);
    Ok(RefineOutcome {
        cloud: refined,
        delta,
    })
}

/// Gradient of the guidance loss with respect to the diagonal of Θ, chaining
/// through the refinement path `cloud += damping · Replicate(Drop(σ(ÂXΘ) − X))`
/// with the structure, X, and features treated as constants. Feature columns
/// of Θ receive exactly zero (the recover step drops them).
pub fn theta_gradient(
    attr_grads: &DMatrix<f64>,
    caches: &RefineCaches,
    damping: f64,
    leaky_slope: f64,
) -> Result<Vec<f64>> {
    let missing = |what: &str| {
        Error::Config(format!(
            "theta_gradient needs {what} from a completed refine step"
        ))
    };
    let assignment = caches
        .assignment
        .as_ref()
        .ok_or_else(|| missing("the patch assignment"))?;
    let x = caches
        .x
        .as_ref()
        .ok_or_else(|| missing("the vertex features"))?;
    let forward = caches
        .forward
        .as_ref()
        .ok_or_else(|| missing("the forward cache"))?;
    if attr_grads.nrows() != assignment.labels.len() || attr_grads.ncols() != ATTR_DIM {
        return Err(Error::Config(format!(
            "attribute gradient is {}x{} but the assignment covers {} Gaussians",
            attr_grads.nrows(),
            attr_grads.ncols(),
            assignment.labels.len()
        )));
    }
    let k = x.nrows();
    let c = x.ncols();
    if forward.ax.shape() != (k, c) || forward.preact.shape() != (k, c) {
        return Err(Error::Config(
            "forward cache does not match the vertex features".into(),
        ));
    }

    // Adjoint of replication: per-patch sum of member gradients.
    let mut patch_grads: DMatrix<f64> = DMatrix::zeros(k, ATTR_DIM);
    for (i, &p) in assignment.labels.iter().enumerate() {
        for col in 0..ATTR_DIM {
            patch_grads[(p, col)] += attr_grads[(i, col)];
        }
    }
    let mut out = vec![0.0; c];
    for (col, slot) in out.iter_mut().enumerate().take(ATTR_DIM.min(c)) {
        let mut acc = 0.0;
        for p in 0..k {
            acc += patch_grads[(p, col)]
                * leaky_relu_grad(forward.preact[(p, col)], leaky_slope)
                * forward.ax[(p, col)];
        }
        *slot = damping * acc;
    }
    Ok(out)
}

/// Where `optimize` gets its initial cloud.
#[derive(Debug, Clone)]
pub enum InitSource {
    Ply(PathBuf),
    Synth { shape: SynthShape, count: usize },
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Plateau rule: once per full window, compare the latest window mean against
/// the previous one; three consecutive comparisons with < 0.1% relative
/// improvement stop the run.
fn plateau_converged(trace: &[f64], stagnant: &mut usize) -> bool {
    if trace.len() < 2 * CONVERGENCE_WINDOW || !trace.len().is_multiple_of(CONVERGENCE_WINDOW) {
        return false;
    }
    let cur = mean(&trace[trace.len() - CONVERGENCE_WINDOW..]);
    let prev = mean(&trace[trace.len() - 2 * CONVERGENCE_WINDOW..trace.len() - CONVERGENCE_WINDOW]);
    let drop = prev - cur;
    if drop < CONVERGENCE_RELATIVE_DROP * prev.abs().max(f64::MIN_POSITIVE) {
        *stagnant += 1;
    } else {
        *stagnant = 0;
    }
    *stagnant >= CONVERGENCE_PATIENCE
}

/// Atomic PLY write: temp file in the target directory, then rename.
fn save_ply_atomic(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    save_ply(cloud, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Full optimization run: `n0` warm-up iterations of [`ddim_update`], then
/// blocks of `n1` iterations each doing [`hg_refine_step`] followed by
/// [`ddim_update`] plus the Θ update, until the iteration cap or the loss
/// plateau rule fires. Writes the final cloud to `config.output_ply`.
pub fn optimize(
    config: &PipelineConfig,
    init: InitSource,
    y: Option<&str>,
    predictor: &dyn NoisePredictor,
) -> Result<RunReport> {
    config.validate()?;
    let schedule = config.schedule()?;
    let mut cloud = match init {
        InitSource::Ply(path) => load_ply(&path)?,
        InitSource::Synth { shape, count } => synth_init(shape, count, config.seed)?,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = OptimizerState::new(cloud.len());
    let mut theta: Option<ThetaDiag> = None;
    let mut caches = RefineCaches::new();
    let mut times = PhaseTimes::default();
    let mut trace: Vec<f64> = Vec::new();
    let lens = config.intrinsics();
    let mut stagnant = 0usize;
    let mut converged = false;

    let guided_step = |cloud: &GaussianCloud,
                       optimizer: &mut OptimizerState,
                       rng: &mut ChaCha8Rng,
                       times: &mut PhaseTimes|
     -> Result<DdimOutcome> {
        let poses = sample_poses(
            config.cm_count,
            config.camera_radius,
            rng.gen::<u64>(),
            &lens,
        )?;
        ddim_update(
            cloud, y, &poses, predictor, &schedule, config, optimizer, rng, times,
        )
    };

    let mut iterations = 0usize;
    while iterations < config.n0 && iterations < config.total_iterations && !converged {
        let outcome = guided_step(&cloud, &mut optimizer, &mut rng, &mut times)?;
        cloud = outcome.cloud;
        trace.push(outcome.loss);
        iterations += 1;
        converged = plateau_converged(&trace, &mut stagnant);
    }

    while iterations < config.total_iterations && !converged {
        caches.invalidate_structure();
        for _ in 0..config.n1 {
            if iterations >= config.total_iterations || converged {
                break;
            }
            let refined = hg_refine_step(&cloud, &mut caches, config, &mut theta, &mut times)?;
            cloud = refined.cloud;
            let outcome = guided_step(&cloud, &mut optimizer, &mut rng, &mut times)?;
            cloud = outcome.cloud;
            trace.push(outcome.loss);

            let theta_grad = theta_gradient(
                &outcome.attr_grads,
                &caches,
                config.refine_damping,
                config.leaky_slope,
            )?;
            let theta_ref = theta.as_mut().expect("theta exists after a refine step");
            optimizer.apply_theta_step(theta_ref, &theta_grad, config.theta_lr)?;

            iterations += 1;
            converged = plateau_converged(&trace, &mut stagnant);
        }
    }

    let out_path = PathBuf::from(&config.output_ply);
    save_ply_atomic(&cloud, &out_path)?;
    Ok(RunReport {
        loss_trace: trace,
        phase_seconds: times,
        final_cloud_path: config.output_ply.clone(),
        structure_rebuilds: caches.structure_rebuilds,
        structure_cache_hits: caches.structure_cache_hits,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gs::COL_LOG_SCALE;
    use crate::guidance::{PointMassPredictor, ZeroPredictor};
    use crate::render::ImageTensor;
    use std::collections::BTreeMap;

    /// Small, fast config for unit runs.
    fn tiny_config(dir: &Path, name: &str) -> PipelineConfig {
        PipelineConfig {
            seed: 11,
            n0: 2,
            n1: 2,
            k_pat: 5,
            k_spa: 2,
            k_lat: 2,
            total_iterations: 6,
            cm_count: 1,
            feature_views: 1,
            kmeans_max_iter: 20,
            image_width: 16,
            image_height: 16,
            extractor: ExtractorSpec::DownsampleGray { grid: 2 },
            output_ply: dir.join(name).to_string_lossy().into_owned(),
            ..PipelineConfig::default()
        }
    }

    fn small_cloud(m: usize, seed: u64) -> GaussianCloud {
        synth_init(SynthShape::Sphere { radius: 1.0 }, m, seed).unwrap()
    }

    fn flat_target(w: usize, h: usize, rgb: [f64; 3]) -> ImageTensor {
        ImageTensor::filled(w, h, rgb)
    }

    fn point_mass_for(config: &PipelineConfig, target: ImageTensor) -> PointMassPredictor {
        let mut targets = BTreeMap::new();
        targets.insert("subject".to_string(), target);
        PointMassPredictor::new(config.schedule().unwrap(), targets).unwrap()
    }

    #[test]
    fn config_defaults_match_the_documented_setup() {
        let c = PipelineConfig::default();
        assert_eq!(
            (c.n0, c.n1, c.k_pat, c.k_spa, c.k_lat),
            (1000, 50, 50, 13, 13)
        );
        assert_eq!(c.total_iterations, 4000);
        assert!((c.position_lr - 1.6e-6).abs() < 1e-18);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = PipelineConfig::default();
        let cases: Vec<PipelineConfig> = vec![
            PipelineConfig {
                n1: 0,
                ..ok.clone()
            },
            PipelineConfig {
                k_pat: 0,
                ..ok.clone()
            },
            PipelineConfig {
                k_spa: 50,
                ..ok.clone()
            },
            PipelineConfig {
                k_lat: 0,
                ..ok.clone()
            },
            PipelineConfig {
                position_lr: 0.0,
                ..ok.clone()
            },
            PipelineConfig {
                color_lr: -1.0,
                ..ok.clone()
            },
            PipelineConfig {
                theta_lr: f64::NAN,
                ..ok.clone()
            },
            PipelineConfig {
                total_iterations: 0,
                ..ok.clone()
            },
            PipelineConfig {
                cm_count: 0,
                ..ok.clone()
            },
            PipelineConfig {
                refine_damping: -0.1,
                ..ok.clone()
            },
            PipelineConfig {
                leaky_slope: 0.0,
                ..ok.clone()
            },
            PipelineConfig {
                leaky_slope: 1.5,
                ..ok.clone()
            },
            PipelineConfig {
                w_spa: 0.0,
                ..ok.clone()
            },
            PipelineConfig {
                kmeans_max_iter: 0,
                ..ok.clone()
            },
            PipelineConfig {
                camera_radius: 0.0,
                ..ok.clone()
            },
            PipelineConfig {
                image_width: 2,
                ..ok.clone()
            },
            PipelineConfig {
                fov_y: 4.0,
                ..ok.clone()
            },
            PipelineConfig {
                background: [1.5, 0.0, 0.0],
                ..ok.clone()
            },
            PipelineConfig {
                beta_start: 0.9,
                beta_end: 0.95,
                ..ok.clone()
            },
            PipelineConfig {
                output_ply: String::new(),
                ..ok.clone()
            },
        ];
        for (i, bad) in cases.iter().enumerate() {
            assert!(bad.validate().is_err(), "case {i} should fail");
        }
    }

    #[test]
    fn config_json_roundtrip_and_unknown_keys() {
        // Partial document: missing fields take defaults.
        let parsed: PipelineConfig =
            serde_json::from_str(r#"{"seed": 3, "n0": 7, "ism": {"cfg_scale": 3.0}}"#).unwrap();
        assert_eq!(parsed.seed, 3);
        assert_eq!(parsed.n0, 7);
        assert!((parsed.ism.cfg_scale - 3.0).abs() < 1e-12);
        assert_eq!(parsed.n1, PipelineConfig::default().n1);

        // Unknown keys are rejected.
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"n_zero": 7}"#).is_err());

        // Full roundtrip.
        let json = serde_json::to_string(&PipelineConfig::default()).unwrap();
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, PipelineConfig::default());
    }

    #[test]
    fn zero_gradients_leave_the_cloud_bitwise_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path(), "zero.ply");
        let cloud = small_cloud(12, 5);
        let schedule = config.schedule().unwrap();
        let mut optimizer = OptimizerState::new(cloud.len());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut times = PhaseTimes::default();
        let poses = sample_poses(2, config.camera_radius, 9, &config.intrinsics()).unwrap();

        let before = cloud.to_attribute_matrix();
        let out = ddim_update(
            &cloud,
            None,
            &poses,
            &ZeroPredictor,
            &schedule,
            &config,
            &mut optimizer,
            &mut rng,
            &mut times,
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.cloud.to_attribute_matrix(), before);
        assert!(out.attr_grads.iter().all(|&g| g == 0.0));
        assert_eq!(optimizer.step_count(), 1);
    }

    #[test]
    fn ddim_update_is_deterministic_and_freezes_scale_and_rotation() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path(), "det.ply");
        let cloud = small_cloud(10, 3);
        let schedule = config.schedule().unwrap();
        let target = flat_target(config.image_width, config.image_height, [0.9, 0.1, 0.2]);
        let predictor = point_mass_for(&config, target);
        let poses = sample_poses(2, config.camera_radius, 4, &config.intrinsics()).unwrap();

        let run = |seed: u64| {
            let mut optimizer = OptimizerState::new(cloud.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut times = PhaseTimes::default();
            ddim_update(
                &cloud,
                Some("subject"),
                &poses,
                &predictor,
                &schedule,
                &config,
                &mut optimizer,
                &mut rng,
                &mut times,
            )
            .unwrap()
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a.cloud.to_attribute_matrix(), b.cloud.to_attribute_matrix());
        assert_eq!(a.loss, b.loss);

        // Frozen columns bitwise intact; at least one guided column moved.
        let before = cloud.to_attribute_matrix();
        let after = a.cloud.to_attribute_matrix();
        for row in 0..before.nrows() {
            for col in COL_LOG_SCALE.chain(crate::gs::COL_ROTATION) {
                assert_eq!(after[(row, col)], before[(row, col)]);
            }
        }
        assert!(
            after != before,
            "guided columns should move under a real gradient"
        );
    }

    #[test]
    fn color_only_descent_halves_the_pixel_error() {
        // Reference: the same geometry with saturated colors; the subject
        // starts from random colors and is guided toward the reference's
        // canonical-view render.
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path(), "descent.ply");
        config.image_width = 24;
        config.image_height = 24;
        config.color_lr = 1e-2;
        config.position_lr = 1e-30; // color-only: park the other groups
        config.opacity_lr = 1e-30;
        let lens = config.intrinsics();

        let subject = small_cloud(40, 8);
        let mut reference = subject.clone();
        for g in reference.gaussians.iter_mut() {
            g.color = nalgebra::Vector3::new(0.92, 0.06, 0.06);
        }
        let eval_pose = sample_poses(1, config.camera_radius, 123, &lens).unwrap()[0].clone();
        let target = render(&reference, &eval_pose, config.background).unwrap();
        let predictor = point_mass_for(&config, target.rgb.clone());
        let schedule = config.schedule().unwrap();

        let error_of = |cloud: &GaussianCloud| {
            let img = render(cloud, &eval_pose, config.background).unwrap();
            img.rgb.mean_abs_diff(&target.rgb)
        };

        let initial = error_of(&subject);
        let mut cloud = subject;
        let mut optimizer = OptimizerState::new(cloud.len());
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut times = PhaseTimes::default();
        for _ in 0..200 {
            let poses = sample_poses(1, config.camera_radius, rng.gen::<u64>(), &lens).unwrap();
            let out = ddim_update(
                &cloud,
                Some("subject"),
                &poses,
                &predictor,
                &schedule,
                &config,
                &mut optimizer,
                &mut rng,
                &mut times,
            )
            .unwrap();
            cloud = out.cloud;
        }
        let final_err = error_of(&cloud);
        assert!(
            final_err <= 0.5 * initial,
            "pixel error {initial:.5} only decreased to {final_err:.5}"
        );
    }

    /// Identity structure: every patch is its own hyperedge in both groups,
    /// which makes the normalized operator exactly the identity.
    fn identity_structure(k: usize) -> Hypergraph {
        let single = |group| Hypergraph {
            n_vertices: k,
            edges: (0..k).map(|v| vec![v]).collect(),
            edge_weights: vec![1.0; k],
            group,
        };
        concat_hypergraphs(
            &single(HypergraphGroup::Spatial),
            &single(HypergraphGroup::Latent),
            1.0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn identity_structure_with_unit_theta_is_a_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path(), "ident.ply");
        config.leaky_slope = 1.0; // linear activation
        let cloud = small_cloud(30, 9);
        let mut caches = RefineCaches::new();
        caches.operator = Some(RefineOperator::Hyper(identity_structure(config.k_pat)));
        let mut theta = None;
        let mut times = PhaseTimes::default();

        let before = cloud.to_attribute_matrix();
        let out = hg_refine_step(&cloud, &mut caches, &config, &mut theta, &mut times).unwrap();
        assert!(out.delta.iter().all(|&v| v == 0.0));
        assert_eq!(out.cloud.to_attribute_matrix(), before);
        // The preloaded structure counts as a cache hit, not a rebuild.
        assert_eq!(caches.structure_rebuilds, 0);
        assert_eq!(caches.structure_cache_hits, 1);
    }

    #[test]
    fn zero_damping_is_bitwise_inert() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path(), "damp.ply");
        config.refine_damping = 0.0;
        let cloud = small_cloud(25, 13);
        let mut caches = RefineCaches::new();
        let mut theta = None;
        let mut times = PhaseTimes::default();

        let before = cloud.to_attribute_matrix();
        let out = hg_refine_step(&cloud, &mut caches, &config, &mut theta, &mut times).unwrap();
        assert_eq!(out.cloud.to_attribute_matrix(), before);
        assert!(out.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_peers_receive_identical_increments_and_unit_quaternions() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path(), "repl.ply");
        config.refine_damping = 0.7;
        let cloud = synth_init(
            SynthShape::TwoBlobs {
                separation: 2.0,
                radius: 0.8,
            },
            60,
            21,
        )
        .unwrap();
        let mut caches = RefineCaches::new();
        let mut theta = None;
        let mut times = PhaseTimes::default();

        let out = hg_refine_step(&cloud, &mut caches, &config, &mut theta, &mut times).unwrap();
        let labels = &caches.assignment.as_ref().unwrap().labels;
        for patch in 0..config.k_pat {
            let members: Vec<usize> = (0..cloud.len()).filter(|&i| labels[i] == patch).collect();
            for pair in members.windows(2) {
                for col in 0..ATTR_DIM {
                    assert_eq!(
                        out.delta[(pair[0], col)],
                        out.delta[(pair[1], col)],
                        "patch {patch} col {col}"
                    );
                }
            }
        }
        for g in &out.cloud.gaussians {
            let n: f64 = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        // A nonzero refinement actually moved something.
        assert!(out.delta.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn structure_cache_counts_follow_the_block_pattern() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path(), "cache.ply");
        let cloud = small_cloud(30, 17);
        let mut caches = RefineCaches::new();
        let mut theta = None;
        let mut times = PhaseTimes::default();

        let blocks = 3;
        let steps_per_block = 4;
        let mut current = cloud;
        for _ in 0..blocks {
            caches.invalidate_structure();
            for _ in 0..steps_per_block {
                current = hg_refine_step(&current, &mut caches, &config, &mut theta, &mut times)
                    .unwrap()
                    .cloud;
            }
        }
        assert_eq!(caches.structure_rebuilds, blocks);
        assert_eq!(caches.structure_cache_hits, blocks * (steps_per_block - 1));
    }

    #[test]
    fn refine_rejects_oversized_neighbor_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path(), "kbig.ply");
        // k_spa >= k_pat escapes config validation only if we skip it, so
        // build the erroneous case directly at the structure level.
        config.k_pat = 4;
        config.k_spa = 4;
        config.k_lat = 2;
        let cloud = small_cloud(20, 19);
        let mut caches = RefineCaches::new();
        let mut theta = None;
        let mut times = PhaseTimes::default();
        let err = hg_refine_step(&cloud, &mut caches, &config, &mut theta, &mut times);
        assert!(err.is_err());
    }

    #[test]
    fn theta_gradient_matches_finite_differences() {
        let k = 4;
        let m = 12;
        let c_lat = 3;
        let c = ATTR_DIM + c_lat;
        let damping = 0.8;
        let slope = 0.01;
        let mut rng = ChaCha8Rng::seed_from_u64(31);

        let points = DMatrix::from_fn(k, 3, |_, _| rng.gen_range(-1.0..1.0));
        let h = build_knn_hypergraph(&points, 2, HypergraphGroup::Spatial).unwrap();
        let x = DMatrix::from_fn(k, c, |_, _| rng.gen_range(-1.0..1.0));
        let theta = ThetaDiag((0..c).map(|_| rng.gen_range(0.5..1.5)).collect());
        let labels: Vec<usize> = (0..m).map(|i| i % k).collect();
        let grads = DMatrix::from_fn(m, ATTR_DIM, |_, _| rng.gen_range(-1.0..1.0));

        let (_, forward) = hgnn_forward_with_cache(&x, &h, &theta, slope).unwrap();
        let caches = RefineCaches {
            operator: Some(RefineOperator::Hyper(h.clone())),
            assignment: Some(PatchAssignment {
                labels: labels.clone(),
                centroids: vec![nalgebra::Vector3::zeros(); k],
            }),
            x: Some(x.clone()),
            forward: Some(forward),
            structure_rebuilds: 1,
            structure_cache_hits: 0,
        };
        let analytic = theta_gradient(&grads, &caches, damping, slope).unwrap();

        // Scalar loss under the same freezing convention: dot the fixed
        // attribute gradient with the replicated damped increment.
        let loss_of = |theta_vec: &[f64]| -> f64 {
            let (xt, _) =
                hgnn_forward_with_cache(&x, &h, &ThetaDiag(theta_vec.to_vec()), slope).unwrap();
            let mut loss = 0.0;
            for (i, &p) in labels.iter().enumerate() {
                for col in 0..ATTR_DIM {
                    loss += grads[(i, col)] * damping * (xt[(p, col)] - x[(p, col)]);
                }
            }
            loss
        };
        let step = 1e-6;
        for idx in 0..c {
            let mut plus = theta.0.clone();
            let mut minus = theta.0.clone();
            plus[idx] += step;
            minus[idx] -= step;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            let denom = fd.abs().max(analytic[idx].abs()).max(1e-10);
            assert!(
                (fd - analytic[idx]).abs() / denom < 1e-3,
                "theta[{idx}]: fd {fd} vs analytic {}",
                analytic[idx]
            );
            if idx >= ATTR_DIM {
                assert_eq!(analytic[idx], 0.0, "feature columns receive no gradient");
            }
        }

        // Linearity and damping scaling.
        let zeros = DMatrix::zeros(m, ATTR_DIM);
        assert!(theta_gradient(&zeros, &caches, damping, slope)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(theta_gradient(&grads, &caches, 0.0, slope)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(theta_gradient(&grads, &RefineCaches::new(), damping, slope).is_err());
    }

    #[test]
    fn optimize_runs_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let mut c1 = tiny_config(dir.path(), "det1.ply");
        c1.n0 = 2;
        c1.n1 = 2;
        c1.total_iterations = 6;
        let mut c2 = c1.clone();
        c2.output_ply = dir.path().join("det2.ply").to_string_lossy().into_owned();

        let target = flat_target(c1.image_width, c1.image_height, [0.8, 0.3, 0.2]);
        let predictor = point_mass_for(&c1, target);
        let init = InitSource::Synth {
            shape: SynthShape::Sphere { radius: 1.0 },
            count: 40,
        };

        let r1 = optimize(&c1, init.clone(), Some("subject"), &predictor).unwrap();
        let r2 = optimize(&c2, init, Some("subject"), &predictor).unwrap();
        assert_eq!(r1.loss_trace, r2.loss_trace);
        let bytes1 = std::fs::read(dir.path().join("det1.ply")).unwrap();
        let bytes2 = std::fs::read(dir.path().join("det2.ply")).unwrap();
        assert_eq!(bytes1, bytes2);
        assert_eq!(r1.loss_trace.len(), 6);
        // Warm-up of 2 then one block of 2 and a truncated block of 2.
        assert_eq!(r1.structure_rebuilds, 2);
        assert_eq!(r1.structure_cache_hits, 2);
    }

    #[test]
    fn zero_damping_reduces_to_the_warmup_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let mut warm = tiny_config(dir.path(), "warm.ply");
        warm.n0 = 8;
        warm.n1 = 4;
        warm.total_iterations = 8;
        let mut damped = tiny_config(dir.path(), "damped.ply");
        damped.n0 = 2;
        damped.n1 = 3;
        damped.total_iterations = 8;
        damped.refine_damping = 0.0;

        let target = flat_target(warm.image_width, warm.image_height, [0.7, 0.4, 0.1]);
        let predictor = point_mass_for(&warm, target);
        let init = InitSource::Synth {
            shape: SynthShape::Sphere { radius: 1.0 },
            count: 30,
        };

        let a = optimize(&warm, init.clone(), Some("subject"), &predictor).unwrap();
        let b = optimize(&damped, init, Some("subject"), &predictor).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        let warm_bytes = std::fs::read(dir.path().join("warm.ply")).unwrap();
        let damped_bytes = std::fs::read(dir.path().join("damped.ply")).unwrap();
        assert_eq!(warm_bytes, damped_bytes);
        assert_eq!(a.structure_rebuilds, 0);
        assert_eq!(b.structure_rebuilds, 2);
    }

    #[test]
    fn loop_bounds_cover_the_degenerate_phases() {
        let dir = tempfile::tempdir().unwrap();
        let target_rgb = [0.6, 0.2, 0.2];

        // total = n0: pure warm-up, no refine blocks.
        let mut pure = tiny_config(dir.path(), "pure.ply");
        pure.n0 = 3;
        pure.total_iterations = 3;
        let predictor = point_mass_for(
            &pure,
            flat_target(pure.image_width, pure.image_height, target_rgb),
        );
        let init = InitSource::Synth {
            shape: SynthShape::Sphere { radius: 1.0 },
            count: 25,
        };
        let r = optimize(&pure, init.clone(), Some("subject"), &predictor).unwrap();
        assert_eq!(r.loss_trace.len(), 3);
        assert_eq!(r.structure_rebuilds, 0);
        assert_eq!(r.structure_cache_hits, 0);

        // n0 = 0: the first executed phase is a refine block.
        let mut no_warm = tiny_config(dir.path(), "nowarm.ply");
        no_warm.n0 = 0;
        no_warm.n1 = 2;
        no_warm.total_iterations = 4;
        let r = optimize(&no_warm, init, Some("subject"), &predictor).unwrap();
        assert_eq!(r.loss_trace.len(), 4);
        assert_eq!(r.structure_rebuilds, 2);
        assert_eq!(r.structure_cache_hits, 2);
    }

    #[test]
    fn gcn_and_hgnn_modes_produce_different_refinements() {
        let dir = tempfile::tempdir().unwrap();
        let config_h = tiny_config(dir.path(), "hyper.ply");
        let mut config_g = tiny_config(dir.path(), "gcn.ply");
        config_g.use_gcn = true;

        let cloud = synth_init(
            SynthShape::TwoBlobs {
                separation: 2.0,
                radius: 0.8,
            },
            60,
            33,
        )
        .unwrap();
        let run = |config: &PipelineConfig| {
            let mut caches = RefineCaches::new();
            let mut theta = None;
            let mut times = PhaseTimes::default();
            hg_refine_step(&cloud, &mut caches, config, &mut theta, &mut times).unwrap()
        };
        let hyper = run(&config_h);
        let gcn = run(&config_g);
        assert!(hyper.delta.iter().all(|v| v.is_finite()));
        assert!(gcn.delta.iter().all(|v| v.is_finite()));
        let max_gap = hyper
            .delta
            .iter()
            .zip(gcn.delta.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(
            max_gap > 1e-12,
            "the two convolution modes coincided (gap {max_gap})"
        );
    }

    /// Mean within-patch color variance under a fresh position clustering.
    fn patch_color_variance(cloud: &GaussianCloud, k: usize, seed: u64) -> f64 {
        let assignment = kmeans(&cloud.positions(), k, seed, 25).unwrap();
        let mut total = 0.0;
        for patch in 0..k {
            let members = assignment.members(patch).unwrap();
            let mut mean = nalgebra::Vector3::zeros();
            for &i in &members {
                mean += cloud.gaussians[i].color;
            }
            mean /= members.len() as f64;
            let var: f64 = members
                .iter()
                .map(|&i| (cloud.gaussians[i].color - mean).norm_squared())
                .sum::<f64>()
                / members.len() as f64;
            total += var;
        }
        total / k as f64
    }

    #[test]
    fn smoke_run_keeps_descending_and_smooths_patch_colors() {
        // A warm-up-only run (total = n0) is the pre-refine snapshot; the
        // full run shares its first 50 iterations bitwise because refine
        // steps never consume guidance randomness.
        let dir = tempfile::tempdir().unwrap();
        let full = PipelineConfig {
            seed: 7,
            n0: 50,
            n1: 10,
            total_iterations: 70,
            cm_count: 1,
            feature_views: 1,
            kmeans_max_iter: 25,
            image_width: 32,
            image_height: 32,
            extractor: ExtractorSpec::DownsampleGray { grid: 4 },
            output_ply: dir.path().join("full.ply").to_string_lossy().into_owned(),
            ..PipelineConfig::default()
        };
        let mut warm = full.clone();
        warm.total_iterations = 50;
        warm.output_ply = dir.path().join("warm.ply").to_string_lossy().into_owned();

        let init_cloud = synth_init(SynthShape::Sphere { radius: 1.0 }, 2000, full.seed).unwrap();
        let mut reference = init_cloud.clone();
        for g in reference.gaussians.iter_mut() {
            g.color = nalgebra::Vector3::new(0.85, 0.15, 0.1);
        }
        let pose = sample_poses(1, full.camera_radius, 99, &full.intrinsics()).unwrap()[0].clone();
        let target = render(&reference, &pose, full.background).unwrap();
        let predictor = point_mass_for(&full, target.rgb.clone());
        let init = InitSource::Synth {
            shape: SynthShape::Sphere { radius: 1.0 },
            count: 2000,
        };

        let warm_report = optimize(&warm, init.clone(), Some("subject"), &predictor).unwrap();
        let full_report = optimize(&full, init, Some("subject"), &predictor).unwrap();

        assert_eq!(warm_report.loss_trace.len(), 50);
        assert_eq!(full_report.loss_trace.len(), 70);
        assert_eq!(full_report.loss_trace[..50], warm_report.loss_trace[..]);
        assert_eq!(full_report.structure_rebuilds, 2);
        assert_eq!(full_report.structure_cache_hits, 18);

        let initial = full_report.loss_trace[0];
        let final_loss = *full_report.loss_trace.last().unwrap();
        let pre_cloud = load_ply(Path::new(&warm.output_ply)).unwrap();
        let post_cloud = load_ply(Path::new(&full.output_ply)).unwrap();
        let var_seed = full.patchify_seed();
        let pre_var = patch_color_variance(&pre_cloud, full.k_pat, var_seed);
        let post_var = patch_color_variance(&post_cloud, full.k_pat, var_seed);
        assert!(
            final_loss < initial,
            "loss rose: {initial:.6} -> {final_loss:.6}"
        );
        assert!(
            post_var <= 1.1 * pre_var,
            "patch color variance rose: {pre_var:.6} -> {post_var:.6}"
        );

        // Values observed on the seeded oracle run, pinned with a 10% margin
        // to absorb cross-platform libm differences.
        let within = |value: f64, pinned: f64| (value - pinned).abs() <= 0.1 * pinned;
        assert!(
            within(initial, 25_970.838_424),
            "initial loss drifted: {initial:.6}"
        );
        assert!(
            within(final_loss, 1_406.099_818),
            "final loss drifted: {final_loss:.6}"
        );
        assert!(
            within(pre_var, 0.246_509),
            "pre-refine variance drifted: {pre_var:.6}"
        );
        assert!(
            within(post_var, 0.129_930),
            "post-refine variance drifted: {post_var:.6}"
        );
    }

    #[test]
    fn plateau_rule_requires_three_stagnant_windows() {
        // Strictly improving trace never converges.
        let improving: Vec<f64> = (0..600).map(|i| 1000.0 / (1.0 + i as f64)).collect();
        let mut stagnant = 0;
        for end in 1..=improving.len() {
            assert!(!plateau_converged(&improving[..end], &mut stagnant));
        }

        // Flat trace converges exactly at the end of the fourth window
        // (three consecutive stagnant comparisons).
        let flat = vec![1.0; 600];
        let mut stagnant = 0;
        let mut fired_at = None;
        for end in 1..=flat.len() {
            if plateau_converged(&flat[..end], &mut stagnant) {
                fired_at = Some(end);
                break;
            }
        }
        assert_eq!(fired_at, Some(400));
    }
}
