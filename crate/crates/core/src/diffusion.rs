//! Variance schedules, closed-form noising, classifier-free guidance and the
//! deterministic DDIM sampler together with its inversion.
//!
//! Latents are stored as `f32`; the per-element DDIM update is evaluated in
//! `f64` and rounded once, so a step followed by its inverse loses at most a
//! couple of ulps.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::conditioning::Conditioning;
use crate::error::{param_err, Error, Result};
use crate::tensor::{all_finite, Shape3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Serializable description of a schedule; `T` is the number of training steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<VarianceSchedule> {
        build_schedule(self.num_steps, self.beta_start, self.beta_end, self.kind)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// β, α and ᾱ sequences for timesteps `1..=T`. Timestep 0 is the clean
/// latent with ᾱ₀ = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_schedule(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<VarianceSchedule> {
    if num_steps == 0 {
        return param_err("schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return param_err(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        ));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            if num_steps == 1 {
                vec![beta_start]
            } else {
                let span = (num_steps - 1) as f64;
                (0..num_steps)
                    .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            // Squared-cosine ᾱ curve; betas clamped to [beta_start, beta_end].
            let s = 0.008;
            let f = |t: f64| {
                let x = (t / num_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (1..=num_steps)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(beta_start, beta_end))
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars: Vec<f64> = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(VarianceSchedule {
        config: ScheduleConfig {
            kind,
            num_steps,
            beta_start,
            beta_end,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl VarianceSchedule {
    pub fn num_steps(&self) -> usize {
        self.config.num_steps
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// ᾱ₁ … ᾱ_T.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// ᾱ_t for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.num_steps() => Ok(self.alpha_bars[t - 1]),
            t => param_err(format!("timestep {t} outside [0, {}]", self.num_steps())),
        }
    }
}

/// Evenly spaced ascending timesteps `0 = t₀ < … < t_n = T`.
pub fn timestep_grid(num_train_steps: usize, num_inference_steps: usize) -> Result<Vec<usize>> {
    if num_inference_steps == 0 || num_inference_steps > num_train_steps {
        return param_err(format!(
            "inference steps must be in [1, {num_train_steps}], got {num_inference_steps}"
        ));
    }
    Ok((0..=num_inference_steps)
        .map(|k| k * num_train_steps / num_inference_steps)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub timestep: usize,
    pub values: Array3<f32>,
}

impl LatentState {
    pub fn new(timestep: usize, values: Array3<f32>) -> Result<Self> {
        if !all_finite(&values) {
            return Err(Error::Numeric("latent contains non-finite entries".into()));
        }
        Ok(Self { timestep, values })
    }

    pub fn clean(values: Array3<f32>) -> Result<Self> {
        Self::new(0, values)
    }

    pub fn shape(&self) -> Shape3 {
        Shape3::of(&self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f32,
    pub enabled: bool,
}

impl GuidanceConfig {
    pub fn new(omega: f32) -> Result<Self> {
        if !(omega >= 0.0 && omega.is_finite()) {
            return param_err(format!("guidance strength must be >= 0, got {omega}"));
        }
        Ok(Self {
            omega,
            enabled: true,
        })
    }

    pub const fn disabled() -> Self {
        Self {
            omega: 0.0,
            enabled: false,
        }
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            enabled: true,
        }
    }
}

fn check_shape(a: &Array3<f32>, b: &Array3<f32>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return param_err(format!(
            "{what}: shape {} does not match {}",
            Shape3::of(a),
            Shape3::of(b)
        ));
    }
    Ok(())
}

/// `z_t = √ᾱ_t·z₀ + √(1−ᾱ_t)·ε`.
pub fn forward_noise(
    z0: &LatentState,
    t: usize,
    eps: &Array3<f32>,
    schedule: &VarianceSchedule,
) -> Result<LatentState> {
    check_shape(eps, &z0.values, "forward_noise")?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut values = z0.values.clone();
    Zip::from(&mut values).and(eps).for_each(|z, &e| {
        *z = (a * *z as f64 + b * e as f64) as f32;
    });
    Ok(LatentState {
        timestep: t,
        values,
    })
}

/// `(1+ω)·ε_cond − ω·ε_uncond`, or `ε_cond` when guidance is disabled.
pub fn cfg_combine(
    eps_cond: &Array3<f32>,
    eps_uncond: &Array3<f32>,
    guidance: GuidanceConfig,
) -> Result<Array3<f32>> {
    check_shape(eps_cond, eps_uncond, "cfg_combine")?;
    if !guidance.enabled || guidance.omega == 0.0 {
        return Ok(eps_cond.clone());
    }
    let w = guidance.omega;
    let mut out = eps_cond.clone();
    Zip::from(&mut out)
        .and(eps_uncond)
        .for_each(|c, &u| *c = (1.0 + w) * *c - w * u);
    Ok(out)
}

/// Moves `z` from timestep `from` to `to` along the deterministic DDIM
/// direction implied by a fixed noise prediction.
fn ddim_transfer(
    z: &Array3<f32>,
    eps_hat: &Array3<f32>,
    from: usize,
    to: usize,
    schedule: &VarianceSchedule,
) -> Result<Array3<f32>> {
    check_shape(eps_hat, z, "ddim update")?;
    let ab_from = schedule.alpha_bar(from)?;
    let ab_to = schedule.alpha_bar(to)?;
    let (sa_from, sb_from) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (sa_to, sb_to) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    let mut out = z.clone();
    Zip::from(&mut out).and(eps_hat).for_each(|v, &e| {
        let e = e as f64;
        let x0 = (*v as f64 - sb_from * e) / sa_from;
        *v = (sa_to * x0 + sb_to * e) as f32;
    });
    if !all_finite(&out) {
        return Err(Error::Numeric(format!("non-finite DDIM update {from} -> {to}")));
    }
    Ok(out)
}

/// One deterministic (η = 0) DDIM step from `t` down to `t_prev`.
pub fn ddim_step(
    z_t: &LatentState,
    eps_hat: &Array3<f32>,
    t: usize,
    t_prev: usize,
    schedule: &VarianceSchedule,
) -> Result<LatentState> {
    if t_prev >= t {
        return param_err(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}"));
    }
    if z_t.timestep != t {
        return param_err(format!("latent is at timestep {}, not {t}", z_t.timestep));
    }
    Ok(LatentState {
        timestep: t_prev,
        values: ddim_transfer(&z_t.values, eps_hat, t, t_prev, schedule)?,
    })
}

/// Inverse of [`ddim_step`] under a fixed noise prediction: `t → t_next`.
pub fn ddim_invert_step(
    z_t: &LatentState,
    eps_hat: &Array3<f32>,
    t: usize,
    t_next: usize,
    schedule: &VarianceSchedule,
) -> Result<LatentState> {
    if t_next <= t {
        return param_err(format!(
            "ddim_invert_step needs t_next > t, got {t_next} <= {t}"
        ));
    }
    if z_t.timestep != t {
        return param_err(format!("latent is at timestep {}, not {t}", z_t.timestep));
    }
    Ok(LatentState {
        timestep: t_next,
        values: ddim_transfer(&z_t.values, eps_hat, t, t_next, schedule)?,
    })
}

/// Anything that predicts the noise component of a batch of latents.
pub trait NoisePredictor: Sync {
    fn latent_shape(&self) -> Shape3;

    fn predict(
        &self,
        latents: &[&Array3<f32>],
        t: usize,
        conds: &[Conditioning],
    ) -> Result<Vec<Array3<f32>>>;
}

/// Predicts zero noise everywhere; under it DDIM is a pure rescaling.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor {
    pub shape: Shape3,
}

impl NoisePredictor for ZeroPredictor {
    fn latent_shape(&self) -> Shape3 {
        self.shape
    }

    fn predict(
        &self,
        latents: &[&Array3<f32>],
        _t: usize,
        _conds: &[Conditioning],
    ) -> Result<Vec<Array3<f32>>> {
        Ok(latents.iter().map(|z| Array3::zeros(z.raw_dim())).collect())
    }
}

fn checked_predict(
    model: &dyn NoisePredictor,
    latents: &[&Array3<f32>],
    t: usize,
    conds: &[Conditioning],
) -> Result<Vec<Array3<f32>>> {
    let out = model.predict(latents, t, conds)?;
    if out.len() != latents.len() {
        return Err(Error::Model(format!(
            "model returned {} predictions for {} latents",
            out.len(),
            latents.len()
        )));
    }
    for (pred, z) in out.iter().zip(latents) {
        if pred.dim() != z.dim() {
            return Err(Error::Model(format!(
                "model output {} does not match latent {}",
                Shape3::of(pred),
                Shape3::of(z)
            )));
        }
    }
    Ok(out)
}

fn guided_prediction(
    model: &dyn NoisePredictor,
    latents: &[&Array3<f32>],
    t: usize,
    conds: &[Conditioning],
    guidance: GuidanceConfig,
) -> Result<Vec<Array3<f32>>> {
    let cond = checked_predict(model, latents, t, conds)?;
    if !guidance.enabled || guidance.omega == 0.0 {
        return Ok(cond);
    }
    let nulls = vec![Conditioning::Null; latents.len()];
    let uncond = checked_predict(model, latents, t, &nulls)?;
    cond.iter()
        .zip(&uncond)
        .map(|(c, u)| cfg_combine(c, u, guidance))
        .collect()
}

/// Deterministic DDIM sampling of a batch from `T` down to 0.
pub fn sample_batch(
    z_big_t: &[LatentState],
    model: &dyn NoisePredictor,
    conds: &[Conditioning],
    guidance: GuidanceConfig,
    schedule: &VarianceSchedule,
    num_inference_steps: usize,
) -> Result<Vec<LatentState>> {
    if z_big_t.len() != conds.len() {
        return param_err("one conditioning per latent is required");
    }
    let big_t = schedule.num_steps();
    if let Some(z) = z_big_t.iter().find(|z| z.timestep != big_t) {
        return param_err(format!(
            "sampling starts at timestep {big_t}, latent is at {}",
            z.timestep
        ));
    }
    let grid = timestep_grid(big_t, num_inference_steps)?;
    let mut states: Vec<LatentState> = z_big_t.to_vec();
    for pair in grid.windows(2).rev() {
        let (t_prev, t) = (pair[0], pair[1]);
        let views: Vec<&Array3<f32>> = states.iter().map(|s| &s.values).collect();
        let eps = guided_prediction(model, &views, t, conds, guidance)?;
        states = states
            .iter()
            .zip(&eps)
            .map(|(s, e)| ddim_step(s, e, t, t_prev, schedule))
            .collect::<Result<_>>()?;
    }
    Ok(states)
}

pub fn sample(
    z_big_t: &LatentState,
    model: &dyn NoisePredictor,
    cond: &Conditioning,
    guidance: GuidanceConfig,
    schedule: &VarianceSchedule,
    num_inference_steps: usize,
) -> Result<LatentState> {
    let mut out = sample_batch(
        std::slice::from_ref(z_big_t),
        model,
        std::slice::from_ref(cond),
        guidance,
        schedule,
        num_inference_steps,
    )?;
    Ok(out.remove(0))
}

/// DDIM inversion of clean latents up to timestep `T`, using the conditional
/// prediction without guidance at every step.
pub fn invert_batch(
    z0: &[LatentState],
    model: &dyn NoisePredictor,
    conds: &[Conditioning],
    schedule: &VarianceSchedule,
    num_inference_steps: usize,
) -> Result<Vec<LatentState>> {
    if z0.len() != conds.len() {
        return param_err("one conditioning per latent is required");
    }
    if let Some(z) = z0.iter().find(|z| z.timestep != 0) {
        return param_err(format!("inversion starts at timestep 0, latent is at {}", z.timestep));
    }
    let grid = timestep_grid(schedule.num_steps(), num_inference_steps)?;
    let mut states: Vec<LatentState> = z0.to_vec();
    for pair in grid.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let views: Vec<&Array3<f32>> = states.iter().map(|s| &s.values).collect();
        let eps = checked_predict(model, &views, t, conds)?;
        states = states
            .iter()
            .zip(&eps)
            .map(|(s, e)| ddim_invert_step(s, e, t, t_next, schedule))
            .collect::<Result<_>>()?;
    }
    Ok(states)
}
