//! Noise schedule, deterministic DDIM updates and guidance mixing.
//!
//! Schedule coefficients are kept in `f64`; updates are evaluated in `f64`
//! per element and rounded once to the tensor's scalar type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[0] == 1`, `alpha_bars[t]` for `t` in `1..=T`.
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(t_train: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(Error::Parameter("T_train must be at least 1".into()));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..t_train)
        .map(|i| {
            if t_train == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(t_train + 1);
    alpha_bars.push(1.0);
    for &b in &betas {
        let prev = *alpha_bars.last().unwrap();
        alpha_bars.push(prev * (1.0 - b));
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        make_schedule(c.t_train, c.beta_start, c.beta_end)
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::Parameter(format!("timestep {t} outside [0, {}]", self.t_train()))
        })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Strictly decreasing timesteps `[t_S, ..., t_1]` with uniform stride; the
/// step after `t_1` lands on `alpha_bar = 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepGrid {
    steps: Vec<usize>,
}

impl TimestepGrid {
    pub fn uniform(t_train: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > t_train {
            return Err(Error::Parameter(format!(
                "step count {steps} must be in [1, {t_train}]"
            )));
        }
        let steps = (1..=steps).rev().map(|i| i * t_train / steps).collect();
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Timestep at ascending position `i` in `0..=S`; position 0 is the
    /// clean endpoint `t = 0`.
    pub fn at(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.steps[self.steps.len() - i]
        }
    }

    /// Descending order, as used for generation.
    pub fn descending(&self) -> &[usize] {
        &self.steps
    }
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample<S: Scalar>(
    schedule: &NoiseSchedule,
    x0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
) -> Result<Tensor<S>> {
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    affine(x0, a, eps, b, "q_sample")
}

fn affine<S: Scalar>(x: &Tensor<S>, a: f64, y: &Tensor<S>, b: f64, op: &'static str) -> Result<Tensor<S>> {
    x.zip_with(y, op, |x, y| {
        S::of(a * x.to_f64().unwrap() + b * y.to_f64().unwrap())
    })
}

fn checked_alpha_bar(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    let ab = schedule.alpha_bar(t)?;
    if ab <= 0.0 || !ab.is_finite() {
        return Err(Error::Numeric(format!("alpha_bar at t={t} is {ab}")));
    }
    Ok(ab)
}

/// Coefficients `(a, b)` with `z_to = a * z_from + b * eps` for the
/// deterministic DDIM map between two noise levels.
fn ddim_coefficients(schedule: &NoiseSchedule, from: usize, to: usize) -> Result<(f64, f64)> {
    let ab_from = checked_alpha_bar(schedule, from)?;
    let ab_to = checked_alpha_bar(schedule, to)?;
    let a = (ab_to / ab_from).sqrt();
    let b = (1.0 - ab_to).sqrt() - ab_to.sqrt() * (1.0 - ab_from).sqrt() / ab_from.sqrt();
    Ok((a, b))
}

/// One deterministic (eta = 0) DDIM denoising step from `t` to `t_prev`.
pub fn ddim_step<S: Scalar>(
    schedule: &NoiseSchedule,
    z_t: &Tensor<S>,
    eps: &Tensor<S>,
    t: usize,
    t_prev: usize,
) -> Result<Tensor<S>> {
    if t_prev > t {
        return Err(Error::Parameter(format!(
            "ddim_step needs t >= t_prev, got t={t}, t_prev={t_prev}"
        )));
    }
    if t == t_prev {
        if z_t.shape() != eps.shape() {
            return Err(Error::dim("ddim_step", "latent and noise shapes differ"));
        }
        return Ok(z_t.clone());
    }
    let (a, b) = ddim_coefficients(schedule, t, t_prev)?;
    affine(z_t, a, eps, b, "ddim_step")
}

/// Inverse of [`ddim_step`] for the same noise prediction: moves from
/// `t_prev` up to `t`.
pub fn ddim_invert_step<S: Scalar>(
    schedule: &NoiseSchedule,
    z_prev: &Tensor<S>,
    eps: &Tensor<S>,
    t_prev: usize,
    t: usize,
) -> Result<Tensor<S>> {
    if t_prev > t {
        return Err(Error::Parameter(format!(
            "ddim_invert_step needs t > t_prev, got t_prev={t_prev}, t={t}"
        )));
    }
    if t == t_prev {
        return Ok(z_prev.clone());
    }
    let (a, b) = ddim_coefficients(schedule, t, t_prev)?;
    // z_prev = a z_t + b eps  =>  z_t = (z_prev - b eps) / a
    affine(z_prev, 1.0 / a, eps, -b / a, "ddim_invert_step")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgForm {
    /// `z_cond + w (z_cond - z_uncond)`.
    #[default]
    CondAnchored,
    /// `z_uncond + w (z_cond - z_uncond)`.
    UncondAnchored,
}

/// Where guidance mixing happens: on the stepped latents or on the noise
/// predictions before stepping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSpace {
    #[default]
    Latent,
    Epsilon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub w_g: f64,
    pub reweight_scale: f64,
    pub form: CfgForm,
    pub space: GuidanceSpace,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w_g: 3.5,
            reweight_scale: 1.0,
            form: CfgForm::CondAnchored,
            space: GuidanceSpace::Latent,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_g >= 0.0 && self.w_g.is_finite()) {
            return Err(Error::Parameter(format!("w_g must be >= 0, got {}", self.w_g)));
        }
        if !(self.reweight_scale > 0.0 && self.reweight_scale.is_finite()) {
            return Err(Error::Parameter(format!(
                "reweight scale must be > 0, got {}",
                self.reweight_scale
            )));
        }
        Ok(())
    }
}

/// Guidance in the cond-anchored form, `z_cond + w (z_cond - z_uncond)`.
pub fn cfg_combine<S: Scalar>(z_cond: &Tensor<S>, z_uncond: &Tensor<S>, w_g: f64) -> Result<Tensor<S>> {
    cfg_combine_with(z_cond, z_uncond, w_g, CfgForm::CondAnchored)
}

pub fn cfg_combine_with<S: Scalar>(
    z_cond: &Tensor<S>,
    z_uncond: &Tensor<S>,
    w_g: f64,
    form: CfgForm,
) -> Result<Tensor<S>> {
    if !(w_g >= 0.0) {
        return Err(Error::Parameter(format!("w_g must be >= 0, got {w_g}")));
    }
    let w = S::of(w_g);
    match form {
        CfgForm::CondAnchored => z_cond.zip_with(z_uncond, "cfg_combine", |c, u| {
            let d = c - u;
            if w_g == 0.0 || d == S::zero() {
                c
            } else {
                c + w * d
            }
        }),
        CfgForm::UncondAnchored => z_cond.zip_with(z_uncond, "cfg_combine", |c, u| {
            let d = c - u;
            if d == S::zero() {
                c
            } else {
                u + w * d
            }
        }),
    }
}
