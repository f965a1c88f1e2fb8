//! Noise schedule and closed-form diffusion updates.
//!
//! Timesteps run `1..=T`; index 0 is the clean state with `alpha_bar_0 = 1`.
//! All schedule arithmetic is done in `f64`.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::codec::PatchSequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidRange(String),
    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("step must move backwards, got {t} -> {t_prev}")]
    NonMonotonic { t: usize, t_prev: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `T + 1` entries, `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

/// Betas spaced linearly from `beta_start` to `beta_end` inclusive.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidRange("T must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (beta_end - beta_start) / (steps - 1) as f64;
        (0..steps).map(|i| if i == steps - 1 { beta_end } else { beta_start + span * i as f64 }).collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(1.0);
    for a in &alphas {
        let prev = *alpha_bars.last().unwrap();
        alpha_bars.push(prev * a);
    }
    Ok(NoiseSchedule { kind: ScheduleKind::Linear, beta_start, beta_end, betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion timesteps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    fn check(&self, t: usize, allow_zero: bool) -> Result<(), DiffusionError> {
        if t > self.steps() || (t == 0 && !allow_zero) {
            return Err(DiffusionError::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Noise-to-signal ratio `sqrt((1 - abar) / abar)`.
    pub fn sigma(&self, t: usize) -> f64 {
        let ab = self.alpha_bars[t];
        ((1.0 - ab) / ab).sqrt()
    }

    /// Posterior coefficients `(coef_x0, coef_xt, variance)` at `t`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64, f64), DiffusionError> {
        self.check(t, false)?;
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let denom = 1.0 - ab;
        let coef_x0 = ab_prev.sqrt() * beta / denom;
        let coef_xt = self.alpha(t).sqrt() * (1.0 - ab_prev) / denom;
        let var = (1.0 - ab_prev) / denom * beta;
        Ok((coef_x0, coef_xt, var))
    }

    /// Evenly spaced, strictly decreasing timestep list from `T` to 0 with
    /// `calls` model evaluations.
    pub fn strided(&self, calls: usize) -> Vec<usize> {
        let n = calls.clamp(1, self.steps());
        let mut out: Vec<usize> = (0..=n)
            .map(|i| ((self.steps() * (n - i)) as f64 / n as f64).round() as usize)
            .collect();
        out.dedup();
        out
    }
}

fn same_shape(a: &PatchSequence, b: &PatchSequence) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

fn axpby(a: f64, x: &Array2<f64>, b: f64, y: &Array2<f64>) -> PatchSequence {
    PatchSequence(Zip::from(x).and(y).map_collect(|&x, &y| a * x + b * y))
}

/// Draws a sequence of i.i.d. standard normal entries.
pub fn standard_normal<R: Rng + ?Sized>(len: usize, width: usize, rng: &mut R) -> PatchSequence {
    PatchSequence(Array2::from_shape_simple_fn((len, width), || rng.sample(StandardNormal)))
}

/// Closed-form forward corruption `sqrt(abar) z0 + sqrt(1 - abar) eps`.
pub fn q_sample(
    z0: &PatchSequence,
    t: usize,
    eps: &PatchSequence,
    sched: &NoiseSchedule,
) -> Result<PatchSequence, DiffusionError> {
    sched.check(t, false)?;
    same_shape(z0, eps)?;
    let ab = sched.alpha_bar(t);
    Ok(axpby(ab.sqrt(), z0.values(), (1.0 - ab).sqrt(), eps.values()))
}

/// Single forward kernel step `sqrt(alpha_t) z_{t-1} + sqrt(beta_t) eps`.
pub fn q_step(
    z_prev: &PatchSequence,
    t: usize,
    eps: &PatchSequence,
    sched: &NoiseSchedule,
) -> Result<PatchSequence, DiffusionError> {
    sched.check(t, false)?;
    same_shape(z_prev, eps)?;
    Ok(axpby(sched.alpha(t).sqrt(), z_prev.values(), sched.beta(t).sqrt(), eps.values()))
}

/// Clean-state estimate implied by a noise prediction.
pub fn eps_to_x0(
    z_t: &PatchSequence,
    eps_hat: &PatchSequence,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<PatchSequence, DiffusionError> {
    sched.check(t, false)?;
    same_shape(z_t, eps_hat)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    Ok(axpby(inv, z_t.values(), -(1.0 - ab).sqrt() * inv, eps_hat.values()))
}

/// Noise implied by a clean-state prediction.
pub fn x0_to_eps(
    z_t: &PatchSequence,
    x0_hat: &PatchSequence,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<PatchSequence, DiffusionError> {
    sched.check(t, false)?;
    same_shape(z_t, x0_hat)?;
    let ab = sched.alpha_bar(t);
    let inv = 1.0 / (1.0 - ab).sqrt();
    Ok(axpby(inv, z_t.values(), -ab.sqrt() * inv, x0_hat.values()))
}

/// Mean and variance of `q(z_{t-1} | z_t, z0_hat)`.
pub fn posterior_params(
    z_t: &PatchSequence,
    z0_hat: &PatchSequence,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(PatchSequence, f64), DiffusionError> {
    same_shape(z_t, z0_hat)?;
    let (c0, ct, var) = sched.posterior_coefficients(t)?;
    Ok((axpby(c0, z0_hat.values(), ct, z_t.values()), var))
}

/// Ancestral step from a clean-state estimate; no noise is added at `t = 1`.
pub fn ddpm_step_from_x0<R: Rng + ?Sized>(
    z_t: &PatchSequence,
    z0_hat: &PatchSequence,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<PatchSequence, DiffusionError> {
    let (mut mu, var) = posterior_params(z_t, z0_hat, t, sched)?;
    if t > 1 && var > 0.0 {
        let sd = var.sqrt();
        mu.values_mut().mapv_inplace(|m| m + sd * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(mu)
}

/// Ancestral step from a noise prediction.
pub fn ddpm_step<R: Rng + ?Sized>(
    z_t: &PatchSequence,
    eps_hat: &PatchSequence,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<PatchSequence, DiffusionError> {
    let z0_hat = eps_to_x0(z_t, eps_hat, t, sched)?;
    ddpm_step_from_x0(z_t, &z0_hat, t, sched, rng)
}

fn check_pair(t: usize, t_prev: usize, sched: &NoiseSchedule, allow_equal: bool) -> Result<(), DiffusionError> {
    sched.check(t, false)?;
    sched.check(t_prev, true)?;
    if t_prev > t || (t_prev == t && !allow_equal) {
        return Err(DiffusionError::NonMonotonic { t, t_prev });
    }
    Ok(())
}

/// Deterministic jump `abar_t -> abar_prev` through the clean-state estimate.
pub fn ddim_update(z_t: &Array2<f64>, eps_hat: &Array2<f64>, abar_t: f64, abar_prev: f64) -> Array2<f64> {
    let a = (abar_prev / abar_t).sqrt();
    let b = (1.0 - abar_prev).sqrt() - a * (1.0 - abar_t).sqrt();
    Zip::from(z_t).and(eps_hat).map_collect(|&z, &e| a * z + b * e)
}

/// Euler step of the probability-flow ODE between the same two levels.
pub fn ode_euler_update(z_t: &Array2<f64>, eps_hat: &Array2<f64>, abar_t: f64, abar_prev: f64) -> Array2<f64> {
    let s_prev = (1.0 - abar_prev) / abar_prev;
    let s_t = (1.0 - abar_t) / abar_t;
    let inv_sqrt = 1.0 / abar_t.sqrt();
    let gain = if abar_t < 1.0 { 0.5 * (s_prev - s_t) * (abar_t / (1.0 - abar_t)).sqrt() } else { 0.0 };
    let outer = abar_prev.sqrt();
    Zip::from(z_t).and(eps_hat).map_collect(|&z, &e| outer * (z * inv_sqrt + gain * e))
}

/// DDIM step `t -> t_prev` in the exact clean-state form.
pub fn ddim_step(
    z_t: &PatchSequence,
    eps_hat: &PatchSequence,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<PatchSequence, DiffusionError> {
    check_pair(t, t_prev, sched, false)?;
    let z0_hat = eps_to_x0(z_t, eps_hat, t, sched)?;
    let ab_prev = sched.alpha_bar(t_prev);
    Ok(axpby(ab_prev.sqrt(), z0_hat.values(), (1.0 - ab_prev).sqrt(), eps_hat.values()))
}

/// First-order (Euler) linearisation of [`ddim_step`] in the noise level.
pub fn ode_euler_step(
    z_t: &PatchSequence,
    eps_hat: &PatchSequence,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<PatchSequence, DiffusionError> {
    check_pair(t, t_prev, sched, true)?;
    same_shape(z_t, eps_hat)?;
    if t == t_prev {
        return Ok(z_t.clone());
    }
    Ok(PatchSequence(ode_euler_update(
        z_t.values(),
        eps_hat.values(),
        sched.alpha_bar(t),
        sched.alpha_bar(t_prev),
    )))
}
