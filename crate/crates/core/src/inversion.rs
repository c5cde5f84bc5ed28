//! Forward-direction steps that carry an input image to the transitional
//! state at `t0`: deterministic DDIM inversion, stochastic DDPM inversion and
//! distortion-adaptive (DA) inversion, which blends the two.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{predict_checked, x0_from_eps, Denoiser};
use crate::diagnostics::{kl_from_moments, sample_moments};
use crate::error::{Result, SsdError};
use crate::operators::LinearOperator;
use crate::rng::{seeded, standard_normal};
use crate::schedule::{make_grid, NoiseSchedule};
use crate::tensor::Tensor;

/// Radicands within this distance below zero are rounding noise, not clamps.
const RADICAND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMethod {
    Ddim,
    Ddpm,
    Da,
}

impl InversionMethod {
    pub const ALL: [InversionMethod; 3] = [Self::Ddim, Self::Ddpm, Self::Da];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ddim => "ddim",
            Self::Ddpm => "ddpm",
            Self::Da => "da",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub eta: f64,
    pub t0: usize,
    pub steps: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            eta: 0.4,
            t0: 550,
            steps: 15,
            rng_seed: 0,
        }
    }
}

impl InversionConfig {
    /// Defaults used for colorization, which needs a deeper shortcut.
    pub fn colorization() -> Self {
        Self {
            eta: 0.8,
            t0: 750,
            ..Self::default()
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(SsdError::invalid(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.steps < 2 {
            return Err(SsdError::invalid(format!("inversion steps {} < 2", self.steps)));
        }
        make_grid(schedule, self.steps, self.t0).map(|_| ())
    }
}

/// Moments of the noise actually injected by one inversion step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepNoise {
    pub t_from: usize,
    pub t_to: usize,
    pub mean: f64,
    pub variance: f64,
    pub kl: f64,
    /// The DA radicand went negative and was clamped to zero.
    pub clamped: bool,
}

impl StepNoise {
    /// Statistics that cannot be estimated (fewer than two elements or a
    /// constant tensor) are recorded as NaN rather than failing the step.
    fn measure(noise: &Tensor, t_from: usize, t_to: usize, clamped: bool) -> Result<Self> {
        let (mean, variance) = sample_moments(noise.data()).unwrap_or((noise.mean(), f64::NAN));
        let kl = kl_from_moments(mean, variance).unwrap_or(f64::NAN);
        Ok(Self {
            t_from,
            t_to,
            mean,
            variance,
            kl,
            clamped,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub records: Vec<StepNoise>,
}

impl NoiseStats {
    pub fn mean_kl(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.kl).sum::<f64>() / self.records.len() as f64
    }

    pub fn any_clamped(&self) -> bool {
        self.records.iter().any(|r| r.clamped)
    }
}

fn check_order(t_from: usize, t_to: usize) -> Result<()> {
    if t_from >= t_to {
        return Err(SsdError::invalid(format!(
            "inversion must move up in time, got {t_from} -> {t_to}"
        )));
    }
    Ok(())
}

/// Noise prediction and clean estimate at the start of an upward step.
///
/// At `t_from = 0` the input is already clean, so `x_{0|0} = x_0` and the
/// denoiser is queried at `t_to`.
fn predict_start<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
) -> Result<(Tensor, Tensor)> {
    if t_from == 0 {
        let eps = predict_checked(denoiser, x_t, t_to)?;
        Ok((eps, x_t.clone()))
    } else {
        let eps = predict_checked(denoiser, x_t, t_from)?;
        let x0 = x0_from_eps(schedule, x_t, &eps, t_from)?;
        Ok((eps, x0))
    }
}

fn clean_estimate(schedule: &NoiseSchedule, x_t: &Tensor, eps: &Tensor, t_from: usize) -> Result<Tensor> {
    if t_from == 0 {
        Ok(x_t.clone())
    } else {
        x0_from_eps(schedule, x_t, eps, t_from)
    }
}

/// DDIM inversion with a noise prediction already in hand.
pub fn ddim_inversion_step_with_eps(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    eps: &Tensor,
    t_from: usize,
    t_to: usize,
) -> Result<Tensor> {
    check_order(t_from, t_to)?;
    let x0 = clean_estimate(schedule, x_t, eps, t_from)?;
    let ab = schedule.alpha_bar(t_to)?;
    x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// `sqrt(ab_to) f(x) + sqrt(1 - ab_to) eps(x)`.
pub fn ddim_inversion_step<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
) -> Result<Tensor> {
    check_order(t_from, t_to)?;
    let (eps, x0) = predict_start(schedule, denoiser, x_t, t_from, t_to)?;
    let ab = schedule.alpha_bar(t_to)?;
    x0.axpby(ab.sqrt(), &eps, (1.0 - ab).sqrt())
}

/// `sqrt(1 - b) x + sqrt(b) z` with `b = beta_eff(t_from, t_to)`.
pub fn ddpm_inversion_step_with_noise(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    z: &Tensor,
) -> Result<Tensor> {
    let b = schedule.beta_eff(t_from, t_to)?;
    x_t.axpby((1.0 - b).sqrt(), z, b.sqrt())
}

pub fn ddpm_inversion_step<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let z = standard_normal(rng, x_t.shape());
    ddpm_inversion_step_with_noise(schedule, x_t, t_from, t_to, &z)
}

/// Coefficients `(sqrt(radicand), sqrt(eta b), clamped)` of a DA step.
fn da_coefficients(schedule: &NoiseSchedule, t_from: usize, t_to: usize, eta: f64) -> Result<(f64, f64, bool)> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(SsdError::invalid(format!("eta {eta} outside [0, 1]")));
    }
    let b = schedule.beta_eff(t_from, t_to)?;
    let ab = schedule.alpha_bar(t_to)?;
    let radicand = 1.0 - ab - eta * b;
    let clamped = radicand < -RADICAND_SLACK;
    if clamped {
        log::warn!("DA radicand {radicand:e} at {t_from} -> {t_to} (eta {eta}) clamped to 0");
    }
    Ok((radicand.max(0.0).sqrt(), (eta * b).sqrt(), clamped))
}

/// DA step with explicit `eps` and fresh noise `z`; also returns the moments
/// of the composite noise `(sqrt(r) eps + sqrt(eta b) z) / sqrt(1 - ab_to)`.
pub fn da_inversion_step_with_noise(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    eps: &Tensor,
    z: &Tensor,
    t_from: usize,
    t_to: usize,
    eta: f64,
) -> Result<(Tensor, StepNoise)> {
    check_order(t_from, t_to)?;
    eps.ensure_same_shape(x_t)?;
    z.ensure_same_shape(x_t)?;
    let (c_eps, c_z, clamped) = da_coefficients(schedule, t_from, t_to, eta)?;
    let ab = schedule.alpha_bar(t_to)?;
    let x0 = clean_estimate(schedule, x_t, eps, t_from)?;
    let noise = eps.axpby(c_eps, z, c_z)?;
    let out = x0.axpby(ab.sqrt(), &noise, 1.0)?;
    let record = StepNoise::measure(&noise.scale(1.0 / (1.0 - ab).sqrt()), t_from, t_to, clamped)?;
    Ok((out, record))
}

/// Distortion-adaptive inversion step.
///
/// `eta = 0` is exactly the DDIM step and draws nothing from `rng`.
pub fn da_inversion_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    eta: f64,
    rng: &mut R,
) -> Result<(Tensor, StepNoise)> {
    check_order(t_from, t_to)?;
    let (eps, x0) = predict_start(schedule, denoiser, x_t, t_from, t_to)?;
    if eta == 0.0 {
        let ab = schedule.alpha_bar(t_to)?;
        let out = x0.axpby(ab.sqrt(), &eps, (1.0 - ab).sqrt())?;
        let record = StepNoise::measure(&eps, t_from, t_to, false)?;
        return Ok((out, record));
    }
    let (c_eps, c_z, clamped) = da_coefficients(schedule, t_from, t_to, eta)?;
    let ab = schedule.alpha_bar(t_to)?;
    let z = standard_normal(rng, x_t.shape());
    let noise = eps.axpby(c_eps, &z, c_z)?;
    let out = x0.axpby(ab.sqrt(), &noise, 1.0)?;
    let record = StepNoise::measure(&noise.scale(1.0 / (1.0 - ab).sqrt()), t_from, t_to, clamped)?;
    Ok((out, record))
}

/// Predicted moments of the DA composite noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaMoments {
    pub mu_da: f64,
    pub sigma2_da: f64,
    pub clamped: bool,
}

/// Moments of the DA noise when `eps` is i.i.d. `N(mu, sigma2)`, given the
/// target level `alpha_bar` and step variance `beta`.
pub fn da_moments_from_levels(mu: f64, sigma2: f64, alpha_bar: f64, beta: f64, eta: f64) -> Result<DaMoments> {
    if sigma2.is_nan() || sigma2 <= 0.0 {
        return Err(SsdError::invalid(format!("sigma2 {sigma2} must be positive")));
    }
    if alpha_bar.is_nan() || alpha_bar >= 1.0 {
        return Err(SsdError::invalid("alpha_bar must be below 1"));
    }
    let radicand = 1.0 - alpha_bar - eta * beta;
    let clamped = radicand < -RADICAND_SLACK;
    let r = radicand.max(0.0) / (1.0 - alpha_bar);
    Ok(DaMoments {
        mu_da: r.sqrt() * mu,
        sigma2_da: 1.0 + r * (sigma2 - 1.0),
        clamped,
    })
}

pub fn da_moments(
    mu: f64,
    sigma2: f64,
    schedule: &NoiseSchedule,
    t_from: usize,
    t_to: usize,
    eta: f64,
) -> Result<DaMoments> {
    let beta = schedule.beta_eff(t_from, t_to)?;
    da_moments_from_levels(mu, sigma2, schedule.alpha_bar(t_to)?, beta, eta)
}

/// Walks `x0` up the inversion grid with the chosen method.
pub fn invert_from<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    x0: &Tensor,
    cfg: &InversionConfig,
    method: InversionMethod,
) -> Result<(Tensor, NoiseStats)> {
    cfg.validate(schedule)?;
    let grid = make_grid(schedule, cfg.steps, cfg.t0)?;
    let mut rng = seeded(cfg.rng_seed);
    let mut x = x0.clone();
    let mut stats = NoiseStats::default();
    for (t_from, t_to) in grid.ascending_pairs() {
        let record = match method {
            InversionMethod::Ddim => {
                let (eps, start) = predict_start(schedule, denoiser, &x, t_from, t_to)?;
                let ab = schedule.alpha_bar(t_to)?;
                x = start.axpby(ab.sqrt(), &eps, (1.0 - ab).sqrt())?;
                StepNoise::measure(&eps, t_from, t_to, false)?
            }
            InversionMethod::Ddpm => {
                x = ddpm_inversion_step(schedule, &x, t_from, t_to, &mut rng)?;
                // Noise implied relative to the starting image.
                let ab = schedule.alpha_bar(t_to)?;
                let implied = x.axpby(1.0, x0, -ab.sqrt())?.scale(1.0 / (1.0 - ab).sqrt());
                StepNoise::measure(&implied, t_from, t_to, false)?
            }
            InversionMethod::Da => {
                let (next, record) = da_inversion_step(schedule, denoiser, &x, t_from, t_to, cfg.eta, &mut rng)?;
                x = next;
                record
            }
        };
        stats.records.push(record);
    }
    if !x.is_finite() {
        return Err(SsdError::NonFinite("transitional state"));
    }
    Ok((x, stats))
}

/// Starts from `H^+ y` and inverts to the transitional state at `cfg.t0`.
pub fn invert<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    operator: &LinearOperator,
    y: &Tensor,
    cfg: &InversionConfig,
    method: InversionMethod,
) -> Result<(Tensor, NoiseStats)> {
    let x0 = operator.pinv_apply(y)?;
    invert_from(schedule, denoiser, &x0, cfg, method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ConstantDenoiser;
    use crate::rng::seeded;

    fn toy_schedule() -> NoiseSchedule {
        // alpha_bar = [1, 0.5, 0.49]
        NoiseSchedule::from_betas(vec![0.5, 0.02]).unwrap()
    }

    #[test]
    fn ddim_scalar_example() {
        let s = toy_schedule();
        let out = ddim_inversion_step_with_eps(&s, &Tensor::scalar(1.0), &Tensor::scalar(0.3), 1, 2).unwrap();
        assert!((out.data()[0] - 0.994_192_347).abs() < 1e-8, "{}", out.data()[0]);
    }

    #[test]
    fn da_scalar_example() {
        let s = toy_schedule();
        let (out, _) = da_inversion_step_with_noise(
            &s,
            &Tensor::scalar(1.0),
            &Tensor::scalar(0.3),
            &Tensor::scalar(-0.5),
            1,
            2,
            0.4,
        )
        .unwrap();
        assert!((out.data()[0] - 0.947_784_009).abs() < 1e-8, "{}", out.data()[0]);
    }

    #[test]
    fn equal_levels_fixed_point() {
        // alpha_bar barely moves across the step, so exact eps keeps x.
        let s = NoiseSchedule::from_betas(vec![0.3, 1e-14]).unwrap();
        let x0 = Tensor::from_fn(&[4], |i| i as f64 * 0.3 - 0.5);
        let eps = Tensor::from_fn(&[4], |i| 1.0 - i as f64 * 0.7);
        let x = crate::schedule::q_sample(&s, &x0, 1, &eps).unwrap();
        let out = ddim_inversion_step_with_eps(&s, &x, &eps, 1, 2).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn ddpm_zero_noise_is_scaling() {
        let s = toy_schedule();
        let x = Tensor::from_fn(&[3], |i| i as f64);
        let out = ddpm_inversion_step_with_noise(&s, &x, 1, 2, &Tensor::zeros(&[3])).unwrap();
        assert!(out.max_abs_diff(&x.scale(0.98f64.sqrt())).unwrap() < 1e-15);
        // Adjacent steps use the schedule's own beta.
        let d = NoiseSchedule::default();
        assert!((d.beta_eff(41, 42).unwrap() - d.beta(42).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn da_eta_zero_matches_ddim_without_rng() {
        let s = NoiseSchedule::default();
        let den = ConstantDenoiser(Tensor::from_fn(&[5], |i| (i as f64).sin()));
        let x = Tensor::from_fn(&[5], |i| (i as f64).cos());
        let mut rng = seeded(9);
        let (da, _) = da_inversion_step(&s, &den, &x, 100, 180, 0.0, &mut rng).unwrap();
        let ddim = ddim_inversion_step(&s, &den, &x, 100, 180).unwrap();
        assert_eq!(da, ddim);
        let mut fresh = seeded(9);
        assert_eq!(rng.random::<u64>(), fresh.random::<u64>());
    }

    #[test]
    fn da_moments_scalar_example() {
        let r = da_moments_from_levels(0.5, 0.64, 0.49, 0.02, 0.4).unwrap();
        assert!((r.mu_da - 0.496_062_931).abs() < 1e-8, "{}", r.mu_da);
        assert!((r.sigma2_da - 0.645_647).abs() < 1e-6, "{}", r.sigma2_da);
        let fixed = da_moments_from_levels(0.0, 1.0, 0.3, 0.1, 0.7).unwrap();
        assert_eq!((fixed.mu_da, fixed.sigma2_da), (0.0, 1.0));
        let none = da_moments_from_levels(0.3, 0.5, 0.3, 0.1, 0.0).unwrap();
        assert_eq!((none.mu_da, none.sigma2_da), (0.3, 0.5));
    }

    #[test]
    fn radicand_clamp_is_flagged() {
        let r = da_moments_from_levels(0.5, 0.5, 0.5, 0.9, 1.0).unwrap();
        assert!(r.clamped);
        assert_eq!(r.mu_da, 0.0);
    }

    #[test]
    fn rejects_downward_steps() {
        let s = toy_schedule();
        let x = Tensor::scalar(0.0);
        assert!(ddim_inversion_step_with_eps(&s, &x, &x, 2, 1).is_err());
        assert!(ddim_inversion_step_with_eps(&s, &x, &x, 1, 1).is_err());
    }

    #[test]
    fn config_validation() {
        let s = NoiseSchedule::default();
        assert!(InversionConfig::default().validate(&s).is_ok());
        assert!(InversionConfig {
            eta: 1.2,
            ..Default::default()
        }
        .validate(&s)
        .is_err());
        assert!(InversionConfig {
            t0: 1000,
            ..Default::default()
        }
        .validate(&s)
        .is_err());
        assert!(InversionConfig {
            steps: 1,
            ..Default::default()
        }
        .validate(&s)
        .is_err());
        let c = InversionConfig::colorization();
        assert_eq!((c.eta, c.t0, c.steps), (0.8, 750, 15));
    }

    #[test]
    fn two_point_grid_is_one_step() {
        let s = NoiseSchedule::default();
        let den = ConstantDenoiser(Tensor::from_fn(&[6], |i| 0.1 * i as f64));
        let x0 = Tensor::from_fn(&[6], |i| 0.2 - 0.05 * i as f64);
        let cfg = InversionConfig {
            steps: 2,
            rng_seed: 4,
            ..Default::default()
        };
        let (xt, stats) = invert_from(&s, &den, &x0, &cfg, InversionMethod::Da).unwrap();
        let (one, _) = da_inversion_step(&s, &den, &x0, 0, 550, 0.4, &mut seeded(4)).unwrap();
        assert_eq!(xt, one);
        assert_eq!(stats.records.len(), 1);
    }
}
