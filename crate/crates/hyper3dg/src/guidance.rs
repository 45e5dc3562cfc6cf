//! Diffusion schedule, DDIM inversion, and the interval-score-matching loss.
//!
//! The guidance signal compares two noise predictions along a deterministic
//! DDIM inversion trajectory of the rendered image: the classifier-free
//! guided prediction at timestep t against the unconditional prediction one
//! interval earlier at s = t − Δt. Everything runs in pixel space (no latent
//! codec at desk scale) against a pluggable [`NoisePredictor`]; the shipped
//! point-mass predictor is analytic, which makes the DDIM identities exactly
//! testable.
//!
//! Timestep conventions: ᾱ_0 = 1 and γ(0) = 0, so a step out of t = 0 needs
//! no division by √(1−ᾱ_0); predictors must accept t = 0 and return a finite
//! tensor there (the point-mass predictor returns zeros).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::render::{ImageTensor, RenderedImage};

/// Cumulative signal levels ᾱ_1..ᾱ_T of a forward diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Number of diffusion steps T.
    pub fn t_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// ᾱ_t with the convention ᾱ_0 = 1.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else if t <= self.alpha_bar.len() {
            Ok(self.alpha_bar[t - 1])
        } else {
            Err(Error::Config(format!(
                "timestep {t} exceeds the schedule length {}",
                self.alpha_bar.len()
            )))
        }
    }
}

/// Linear-β schedule: β_i interpolates beta_start..beta_end inclusive over
/// `t_steps` steps and ᾱ_t = Π_{i≤t} (1 − β_i).
pub fn schedule_linear(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule> {
    if t_steps < 2 {
        return Err(Error::Config(format!(
            "schedule needs at least 2 steps, got {t_steps}"
        )));
    }
    if !(beta_start.is_finite() && beta_end.is_finite())
        || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0)
    {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < start < end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for i in 0..t_steps {
        let beta = beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64;
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }
    if alpha_bar[0] <= 0.99 {
        return Err(Error::Config(format!(
            "first signal level {} is too far from 1; lower beta_start",
            alpha_bar[0]
        )));
    }
    if *alpha_bar.last().unwrap() <= 0.0 {
        return Err(Error::Numerical(
            "schedule underflowed to zero signal".into(),
        ));
    }
    Ok(DiffusionSchedule { alpha_bar })
}

/// A noise model ε(x, t, y). Implementations must be pure in (x, t, y), safe
/// to call concurrently, accept t = 0, and treat `y = None` as the
/// unconditional branch.
pub trait NoisePredictor {
    fn predict(&self, x: &ImageTensor, t: usize, y: Option<&str>) -> Result<ImageTensor>;
}

/// ε ≡ 0: collapses every DDIM identity to its closed form.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, x: &ImageTensor, _t: usize, _y: Option<&str>) -> Result<ImageTensor> {
        Ok(ImageTensor::zeros(x.width, x.height))
    }
}

/// Analytic predictor for a point-mass data distribution: all probability
/// sits on one target image per condition, so
/// ε(x, t, y) = (x − √ᾱ_t · m_y) / √(1 − ᾱ_t), and ε(·, 0, ·) = 0.
/// The unconditional target defaults to uniform mid-gray.
#[derive(Debug, Clone)]
pub struct PointMassPredictor {
    schedule: DiffusionSchedule,
    targets: BTreeMap<String, ImageTensor>,
    unconditional: Option<ImageTensor>,
}

fn check_target_range(name: &str, img: &ImageTensor) -> Result<()> {
    if img.data.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
        return Err(Error::Config(format!(
            "target image for `{name}` has values outside [0, 1]"
        )));
    }
    Ok(())
}

impl PointMassPredictor {
    pub fn new(
        schedule: DiffusionSchedule,
        targets: BTreeMap<String, ImageTensor>,
    ) -> Result<PointMassPredictor> {
        for (name, img) in &targets {
            check_target_range(name, img)?;
        }
        Ok(PointMassPredictor {
            schedule,
            targets,
            unconditional: None,
        })
    }

    /// Replace the default mid-gray unconditional target.
    pub fn with_unconditional(mut self, img: ImageTensor) -> Result<PointMassPredictor> {
        check_target_range("unconditional", &img)?;
        self.unconditional = Some(img);
        Ok(self)
    }

    fn target_for(&self, x: &ImageTensor, y: Option<&str>) -> Result<ImageTensor> {
        let target = match y {
            None => self
                .unconditional
                .clone()
                .unwrap_or_else(|| ImageTensor::filled(x.width, x.height, [0.5, 0.5, 0.5])),
            Some(name) => self
                .targets
                .get(name)
                .ok_or_else(|| {
                    Error::Config(format!("no target registered for condition `{name}`"))
                })?
                .clone(),
        };
        if !target.same_shape(x) {
            return Err(Error::Config(format!(
                "target is {}x{} but the latent is {}x{}",
                target.width, target.height, x.width, x.height
            )));
        }
        Ok(target)
    }
}

impl NoisePredictor for PointMassPredictor {
    fn predict(&self, x: &ImageTensor, t: usize, y: Option<&str>) -> Result<ImageTensor> {
        let target = self.target_for(x, y)?;
        if t == 0 {
            return Ok(ImageTensor::zeros(x.width, x.height));
        }
        let ab = self.schedule.alpha_bar_at(t)?;
        Ok(x.add_scaled(&target, -ab.sqrt())
            .scale(1.0 / (1.0 - ab).sqrt()))
    }
}

/// One deterministic DDIM prediction step s → t (s < t):
/// x_t = √ᾱ_t · x̄_0^s + √(1−ᾱ_t) · ε(x_s, s, y), where the data estimate
/// x̄_0^s = x_s/√ᾱ_s − γ(s)·ε(x_s, s, ∅) always uses the unconditional branch
/// and γ(s) = √(1−ᾱ_s)/√ᾱ_s (γ(0) = 0).
pub fn ddim_step(
    x_s: &ImageTensor,
    s: usize,
    t: usize,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
    y: Option<&str>,
) -> Result<ImageTensor> {
    if s >= t {
        return Err(Error::Config(format!(
            "ddim_step needs s < t, got s = {s}, t = {t}"
        )));
    }
    let ab_t = schedule.alpha_bar_at(t)?;
    let x0_hat = if s == 0 {
        x_s.clone()
    } else {
        let ab_s = schedule.alpha_bar_at(s)?;
        let gamma = (1.0 - ab_s).sqrt() / ab_s.sqrt();
        let eps_uncond = predictor.predict(x_s, s, None)?;
        x_s.scale(1.0 / ab_s.sqrt()).add_scaled(&eps_uncond, -gamma)
    };
    let eps = predictor.predict(x_s, s, y)?;
    let x_t = x0_hat
        .scale(ab_t.sqrt())
        .add_scaled(&eps, (1.0 - ab_t).sqrt());
    if !x_t.is_finite() {
        return Err(Error::Numerical(format!(
            "ddim_step {s} -> {t} produced non-finite values"
        )));
    }
    Ok(x_t)
}

/// Unconditional inversion trajectory {x_Δt, x_2Δt, …, x_t_target} obtained by
/// repeated [`ddim_step`]; fully deterministic.
pub fn ddim_invert(
    x_0: &ImageTensor,
    t_target: usize,
    delta_t: usize,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<Vec<ImageTensor>> {
    if delta_t == 0 {
        return Err(Error::Config("delta_t must be positive".into()));
    }
    if t_target == 0 || !t_target.is_multiple_of(delta_t) {
        return Err(Error::Config(format!(
            "t_target = {t_target} must be a positive multiple of delta_t = {delta_t}"
        )));
    }
    let mut trajectory = Vec::with_capacity(t_target / delta_t);
    let mut x = x_0.clone();
    let mut s = 0;
    while s < t_target {
        let t = s + delta_t;
        x = ddim_step(&x, s, t, schedule, predictor, None)?;
        trajectory.push(x.clone());
        s = t;
    }
    Ok(trajectory)
}

/// Weighting ω(t) of the interval score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum OmegaMode {
    Constant {
        value: f64,
    },
    #[default]
    OneMinusAlphaBar,
}

/// Interval-score-matching hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsmConfig {
    /// Interval between the compared timesteps (t and s = t − Δt).
    pub delta_t: usize,
    /// Inversion stride toward s (a multiple of delta_t; the last inversion
    /// step is clipped to land exactly on s).
    pub delta_s: usize,
    /// Upper bound of the timestep draw t ~ U(1, t_max).
    pub t_max: usize,
    /// Classifier-free guidance scale.
    pub cfg_scale: f64,
    pub omega_mode: OmegaMode,
}

impl Default for IsmConfig {
    fn default() -> Self {
        IsmConfig {
            delta_t: 80,
            delta_s: 160,
            t_max: 980,
            cfg_scale: 7.5,
            omega_mode: OmegaMode::default(),
        }
    }
}

impl IsmConfig {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.delta_t == 0 {
            return Err(Error::Config("delta_t must be positive".into()));
        }
        if self.t_max < 2 * self.delta_t {
            return Err(Error::Config(format!(
                "t_max = {} leaves no timestep above delta_t = {} to sample",
                self.t_max, self.delta_t
            )));
        }
        if self.t_max >= schedule.t_steps() {
            return Err(Error::Config(format!(
                "t_max = {} must stay below the schedule length {}",
                self.t_max,
                schedule.t_steps()
            )));
        }
        if self.delta_s < self.delta_t || !self.delta_s.is_multiple_of(self.delta_t) {
            return Err(Error::Config(format!(
                "delta_s = {} must be a multiple of delta_t = {}",
                self.delta_s, self.delta_t
            )));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::Config("cfg_scale must be finite".into()));
        }
        if let OmegaMode::Constant { value } = self.omega_mode {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::Config(format!(
                    "constant omega must be a non-negative finite real, got {value}"
                )));
            }
        }
        Ok(())
    }

    fn omega(&self, t: usize, schedule: &DiffusionSchedule) -> Result<f64> {
        Ok(match self.omega_mode {
            OmegaMode::Constant { value } => value,
            OmegaMode::OneMinusAlphaBar => 1.0 - schedule.alpha_bar_at(t)?,
        })
    }
}

/// Loss, per-pixel gradient, and the timesteps that produced them.
#[derive(Debug, Clone)]
pub struct IsmResult {
    pub loss: f64,
    pub pixel_grad: ImageTensor,
    pub t_used: usize,
    pub s_used: usize,
}

/// One interval-score-matching evaluation of a rendered image.
///
/// Draws t ~ U(1, t_max) rounded to a delta_t multiple (resampling anything
/// that rounds to ≤ delta_t), inverts the render to s = t − Δt with stride
/// delta_s, takes one more unconditional step to t, and compares the guided
/// prediction at t against the unconditional prediction at s:
/// loss = ω(t)·‖ε̂(x_t,t,y) − ε(x_s,s,∅)‖², pixel_grad = ω(t)·(ε̂ − ε).
pub fn ism_grad(
    rendered: &RenderedImage,
    y: Option<&str>,
    predictor: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    cfg: &IsmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<IsmResult> {
    cfg.validate(schedule)?;
    if rendered
        .rgb
        .data
        .iter()
        .any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v))
    {
        return Err(Error::Config(
            "rendered image must lie in [0, 1] to act as a diffusion latent".into(),
        ));
    }

    // Timestep draw; the config validation guarantees 2Δt ≤ t_max so the
    // resampling loop terminates.
    let t = loop {
        let raw = rng.gen_range(1..=cfg.t_max);
        let t = ((raw as f64 / cfg.delta_t as f64).round() as usize) * cfg.delta_t;
        if t > cfg.delta_t && t <= cfg.t_max {
            break t;
        }
    };
    let s = t - cfg.delta_t;

    // Invert 0 → s with stride delta_s, clipping the final step onto s.
    let mut x = rendered.rgb.clone();
    let mut cur = 0usize;
    while cur < s {
        let next = (cur + cfg.delta_s).min(s);
        x = ddim_step(&x, cur, next, schedule, predictor, None)?;
        cur = next;
    }
    let x_s = x;

    let eps_s = predictor.predict(&x_s, s, None)?;
    let x_t = ddim_step(&x_s, s, t, schedule, predictor, None)?;
    let eps_t_uncond = predictor.predict(&x_t, t, None)?;
    let eps_t_cond = predictor.predict(&x_t, t, y)?;
    let eps_guided = eps_t_uncond.add_scaled(&eps_t_cond.sub(&eps_t_uncond), cfg.cfg_scale);

    let diff = eps_guided.sub(&eps_s);
    let omega = cfg.omega(t, schedule)?;
    let loss = omega * diff.data.iter().map(|v| v * v).sum::<f64>();
    let pixel_grad = diff.scale(omega);
    if !pixel_grad.is_finite() || !loss.is_finite() {
        return Err(Error::Numerical(
            "ism_grad produced non-finite values".into(),
        ));
    }
    Ok(IsmResult {
        loss,
        pixel_grad,
        t_used: t,
        s_used: s,
    })
}
