//! Reverse-time sampling and the full shortcut restoration pipeline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{predict_checked, x0_from_eps, Denoiser};
use crate::error::{Result, SsdError};
use crate::inversion::{invert, InversionConfig, InversionMethod, NoiseStats};
use crate::operators::LinearOperator;
use crate::rng::{standard_normal, substream};
use crate::schedule::{make_grid, NoiseSchedule, TimestepGrid};
use crate::tensor::Tensor;

const RADICAND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdPlus {
    pub enabled: bool,
    pub rho_stop: f64,
}

impl Default for SsdPlus {
    fn default() -> Self {
        Self {
            enabled: false,
            rho_stop: 0.2,
        }
    }
}

impl SsdPlus {
    /// Number of trailing generation steps that skip projection.
    pub fn unprojected_tail(&self, steps_gen: usize) -> usize {
        if self.enabled {
            (self.rho_stop * steps_gen as f64).ceil() as usize
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestorationConfig {
    pub inversion: InversionConfig,
    pub steps_gen: usize,
    pub ddim_eta: f64,
    pub ssd_plus: SsdPlus,
    pub rng_seed: u64,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            inversion: InversionConfig::default(),
            steps_gen: 85,
            ddim_eta: 0.0,
            ssd_plus: SsdPlus::default(),
            rng_seed: 0,
        }
    }
}

impl RestorationConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        self.inversion.validate(schedule)?;
        if self.steps_gen < 2 {
            return Err(SsdError::invalid(format!("generation steps {} < 2", self.steps_gen)));
        }
        make_grid(schedule, self.steps_gen, self.inversion.t0)?;
        if !(self.ddim_eta >= 0.0 && self.ddim_eta.is_finite()) {
            return Err(SsdError::invalid(format!("ddim_eta {} must be >= 0", self.ddim_eta)));
        }
        if !(0.0..=1.0).contains(&self.ssd_plus.rho_stop) {
            return Err(SsdError::invalid(format!(
                "rho_stop {} outside [0, 1]",
                self.ssd_plus.rho_stop
            )));
        }
        Ok(())
    }
}

/// Standard DDIM variance for a downward step, scaled by `ddim_eta`.
pub fn sigma_schedule(schedule: &NoiseSchedule, t_from: usize, t_to: usize, ddim_eta: f64) -> Result<f64> {
    if t_to >= t_from {
        return Err(SsdError::invalid(format!(
            "generation must move down in time, got {t_from} -> {t_to}"
        )));
    }
    let a_from = schedule.alpha_bar(t_from)?;
    let a_to = schedule.alpha_bar(t_to)?;
    let var = (1.0 - a_to) / (1.0 - a_from) * (1.0 - a_from / a_to);
    Ok(ddim_eta * var.max(0.0).sqrt())
}

fn direction_coefficient(schedule: &NoiseSchedule, t_to: usize, sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(SsdError::invalid(format!("sigma {sigma} must be >= 0")));
    }
    let radicand = 1.0 - schedule.alpha_bar(t_to)? - sigma * sigma;
    if radicand < -RADICAND_SLACK {
        return Err(SsdError::invalid(format!(
            "sigma {sigma} too large for level {t_to} (radicand {radicand:e})"
        )));
    }
    Ok(radicand.max(0.0).sqrt())
}

/// DDIM update from a clean estimate and noise prediction already in hand.
/// `z` is only read when `sigma > 0`.
pub fn ddim_update(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    eps: &Tensor,
    t_to: usize,
    sigma: f64,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    let a_to = schedule.alpha_bar(t_to)?;
    let c = direction_coefficient(schedule, t_to, sigma)?;
    let out = x0.axpby(a_to.sqrt(), eps, c)?;
    match (sigma > 0.0, z) {
        (false, _) => Ok(out),
        (true, Some(z)) => out.axpby(1.0, z, sigma),
        (true, None) => Err(SsdError::invalid("stochastic step needs a noise draw")),
    }
}

/// Inverse of the DDIM inversion step when the noise prediction is held fixed.
pub fn ddim_generation_step_with_eps(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    eps: &Tensor,
    t_from: usize,
    t_to: usize,
    sigma: f64,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    if t_to >= t_from {
        return Err(SsdError::invalid(format!(
            "expected t_to < t_from, got {t_from} -> {t_to}"
        )));
    }
    let x0 = x0_from_eps(schedule, x_t, eps, t_from)?;
    ddim_update(schedule, &x0, eps, t_to, sigma, z)
}

pub fn ddim_generation_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let eps = predict_checked(denoiser, x_t, t_from)?;
    let z = (sigma > 0.0).then(|| standard_normal(rng, x_t.shape()));
    ddim_generation_step_with_eps(schedule, x_t, &eps, t_from, t_to, sigma, z.as_ref())
}

/// Standard deviation of the ancestral noise in a unit DDPM step.
pub fn ddpm_posterior_std(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(SsdError::Timestep {
            t,
            reason: "no DDPM step from t = 0",
        });
    }
    let var = (1.0 - schedule.alpha_bar(t - 1)?) / (1.0 - schedule.alpha_bar(t)?) * schedule.beta(t)?;
    Ok(var.sqrt())
}

/// Unit ancestral step `t -> t - 1` with explicit noise.
pub fn ddpm_generation_step_with_noise(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    z: &Tensor,
) -> Result<Tensor> {
    let std = ddpm_posterior_std(schedule, t)?;
    let beta = schedule.beta(t)?;
    let ab = schedule.alpha_bar(t)?;
    let inv = 1.0 / (1.0 - beta).sqrt();
    let mean = x_t.axpby(inv, eps, -inv * beta / (1.0 - ab).sqrt())?;
    mean.axpby(1.0, z, std)
}

pub fn ddpm_generation_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    x_t: &Tensor,
    t: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if t == 0 {
        return Err(SsdError::Timestep {
            t,
            reason: "no DDPM step from t = 0",
        });
    }
    let eps = predict_checked(denoiser, x_t, t)?;
    let z = standard_normal(rng, x_t.shape());
    ddpm_generation_step_with_noise(schedule, x_t, &eps, t, &z)
}

/// Output of one (possibly projected) generation step.
#[derive(Debug, Clone)]
pub struct GenerationStep {
    pub x: Tensor,
    /// Clean estimate used for the update, after projection if any.
    pub x0: Tensor,
    pub projected: bool,
}

/// DDIM step whose clean estimate is replaced by its back projection onto
/// `{x : Hx = y}` when `project` is set. The same noise prediction drives the
/// update either way.
#[allow(clippy::too_many_arguments)]
pub fn projected_generation_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    operator: &LinearOperator,
    y: &Tensor,
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    sigma: f64,
    project: bool,
    rng: &mut R,
) -> Result<GenerationStep> {
    if t_to >= t_from {
        return Err(SsdError::invalid(format!(
            "expected t_to < t_from, got {t_from} -> {t_to}"
        )));
    }
    let eps = predict_checked(denoiser, x_t, t_from)?;
    let mut x0 = x0_from_eps(schedule, x_t, &eps, t_from)?;
    if project {
        x0 = operator.back_project(&x0, y)?;
    }
    let z = (sigma > 0.0).then(|| standard_normal(rng, x_t.shape()));
    let x = ddim_update(schedule, &x0, &eps, t_to, sigma, z.as_ref())?;
    Ok(GenerationStep {
        x,
        x0,
        projected: project,
    })
}

/// Measurement guidance for [`generate`].
#[derive(Debug, Clone, Copy)]
pub struct Guidance<'a> {
    pub operator: &'a LinearOperator,
    pub y: &'a Tensor,
    /// Trailing steps that skip projection.
    pub unprojected_tail: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub t_from: usize,
    pub t_to: usize,
    pub sigma: f64,
    pub projected: bool,
    /// `||H x0 - y||_inf` for the clean estimate used in the step.
    pub residual_inf: Option<f64>,
}

/// Runs DDIM down `grid` from `x_start` at `grid.t0()`.
pub fn generate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    x_start: &Tensor,
    grid: &TimestepGrid,
    ddim_eta: f64,
    guidance: Option<Guidance<'_>>,
    rng: &mut R,
) -> Result<(Tensor, Vec<GenerationRecord>)> {
    let n_steps = grid.len() - 1;
    let mut x = x_start.clone();
    let mut trace = Vec::with_capacity(n_steps);
    for (i, (t_from, t_to)) in grid.descending_pairs().enumerate() {
        let sigma = sigma_schedule(schedule, t_from, t_to, ddim_eta)?;
        let step = match guidance {
            Some(g) => {
                let project = n_steps - i > g.unprojected_tail;
                projected_generation_step(
                    schedule, denoiser, g.operator, g.y, &x, t_from, t_to, sigma, project, rng,
                )?
            }
            None => {
                let eps = predict_checked(denoiser, &x, t_from)?;
                let x0 = x0_from_eps(schedule, &x, &eps, t_from)?;
                let z = (sigma > 0.0).then(|| standard_normal(rng, x.shape()));
                let next = ddim_update(schedule, &x0, &eps, t_to, sigma, z.as_ref())?;
                GenerationStep {
                    x: next,
                    x0,
                    projected: false,
                }
            }
        };
        let residual_inf = match guidance {
            Some(g) => Some(g.operator.apply(&step.x0)?.max_abs_diff(g.y)?),
            None => None,
        };
        trace.push(GenerationRecord {
            t_from,
            t_to,
            sigma,
            projected: step.projected,
            residual_inf,
        });
        x = step.x;
    }
    if !x.is_finite() {
        return Err(SsdError::NonFinite("generated sample"));
    }
    Ok((x, trace))
}

#[derive(Debug, Clone)]
pub struct Restoration {
    pub x: Tensor,
    pub stats: NoiseStats,
    pub trace: Vec<GenerationRecord>,
}

/// Shortcut restoration: DA inversion of `H^+ y` to `t0`, then projected DDIM
/// generation back to `t = 0`.
pub fn ssd_restore<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    operator: &LinearOperator,
    y: &Tensor,
    cfg: &RestorationConfig,
) -> Result<Restoration> {
    cfg.validate(schedule)?;
    let (x_t0, stats) = invert(schedule, denoiser, operator, y, &cfg.inversion, InversionMethod::Da)?;
    let grid = make_grid(schedule, cfg.steps_gen, cfg.inversion.t0)?;
    let guidance = Guidance {
        operator,
        y,
        unprojected_tail: cfg.ssd_plus.unprojected_tail(cfg.steps_gen),
    };
    let mut rng = substream(cfg.rng_seed, 1);
    let (x, trace) = generate(schedule, denoiser, &x_t0, &grid, cfg.ddim_eta, Some(guidance), &mut rng)?;
    Ok(Restoration { x, stats, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ConstantDenoiser, ZeroDenoiser};
    use crate::operators::{build_operator, Degradation};
    use crate::rng::seeded;

    #[test]
    fn generation_undoes_inversion_scalar() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.02]).unwrap();
        let x = ddim_generation_step_with_eps(
            &s,
            &Tensor::scalar(0.994_192_347_3),
            &Tensor::scalar(0.3),
            2,
            1,
            0.0,
            None,
        )
        .unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-9, "{}", x.data()[0]);
    }

    #[test]
    fn exact_eps_undoes_q_sample() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::from_fn(&[5], |i| 0.3 * i as f64 - 0.6);
        let eps = Tensor::from_fn(&[5], |i| (i as f64 * 1.7).sin());
        let hi = crate::schedule::q_sample(&s, &x0, 400, &eps).unwrap();
        let lo = crate::schedule::q_sample(&s, &x0, 250, &eps).unwrap();
        let step = ddim_generation_step_with_eps(&s, &hi, &eps, 400, 250, 0.0, None).unwrap();
        assert!(step.max_abs_diff(&lo).unwrap() < 1e-12);
    }

    #[test]
    fn sigma_schedule_cases() {
        let s = NoiseSchedule::default();
        assert_eq!(sigma_schedule(&s, 300, 200, 0.0).unwrap(), 0.0);
        for t in [1usize, 2, 50, 999] {
            let unit = sigma_schedule(&s, t, t - 1, 1.0).unwrap();
            assert!((unit - ddpm_posterior_std(&s, t).unwrap()).abs() < 1e-12);
        }
        let a = sigma_schedule(&s, 500, 300, 0.3).unwrap();
        let b = sigma_schedule(&s, 500, 300, 0.6).unwrap();
        assert!(a < b);
        assert!(sigma_schedule(&s, 300, 300, 1.0).is_err());
    }

    #[test]
    fn ddpm_variance_matches_hand_transcription() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.3]).unwrap();
        // (1 - 0.9) / (1 - 0.63) * 0.3
        let want = (0.1f64 / 0.37 * 0.3).sqrt();
        assert!((ddpm_posterior_std(&s, 2).unwrap() - want).abs() < 1e-15);
        assert_eq!(ddpm_posterior_std(&s, 1).unwrap(), 0.0);
    }

    #[test]
    fn ddpm_zero_prediction_rescales() {
        let s = NoiseSchedule::default();
        let x = Tensor::from_fn(&[4], |i| i as f64);
        let out = ddpm_generation_step_with_noise(&s, &x, &Tensor::zeros(&[4]), 10, &Tensor::zeros(&[4])).unwrap();
        let inv = 1.0 / (1.0 - s.beta(10).unwrap()).sqrt();
        assert!(out.max_abs_diff(&x.scale(inv)).unwrap() < 1e-15);
        assert!(ddpm_generation_step(&s, &ZeroDenoiser, &x, 0, &mut seeded(0)).is_err());
    }

    #[test]
    fn unprojected_step_matches_plain_ddim() {
        let s = NoiseSchedule::default();
        let op = build_operator(&Degradation::SrAverage { scale: 2 }, &[4, 4, 1]).unwrap();
        let y = Tensor::filled(&[2, 2, 1], 0.3);
        let den = ConstantDenoiser(Tensor::from_fn(&[4, 4, 1], |i| 0.05 * i as f64));
        let x = Tensor::from_fn(&[4, 4, 1], |i| (i as f64).cos());
        let sigma = sigma_schedule(&s, 300, 200, 0.5).unwrap();
        let a = projected_generation_step(&s, &den, &op, &y, &x, 300, 200, sigma, false, &mut seeded(1)).unwrap();
        let b = ddim_generation_step(&s, &den, &x, 300, 200, sigma, &mut seeded(1)).unwrap();
        assert_eq!(a.x, b);
    }

    #[test]
    fn identity_projection_overwrites_estimate() {
        let s = NoiseSchedule::default();
        let op = build_operator(&Degradation::Identity, &[2, 2, 1]).unwrap();
        let y = Tensor::from_fn(&[2, 2, 1], |i| 0.1 * i as f64);
        let den = ConstantDenoiser(Tensor::filled(&[2, 2, 1], 0.4));
        let x = Tensor::filled(&[2, 2, 1], -0.2);
        let step = projected_generation_step(&s, &den, &op, &y, &x, 200, 0, 0.0, true, &mut seeded(1)).unwrap();
        assert_eq!(step.x0, y);
        assert!(step.x.max_abs_diff(&y).unwrap() < 1e-15);
    }

    #[test]
    fn ssd_plus_tail() {
        assert_eq!(
            SsdPlus {
                enabled: true,
                rho_stop: 0.2
            }
            .unprojected_tail(85),
            17
        );
        assert_eq!(
            SsdPlus {
                enabled: true,
                rho_stop: 0.0
            }
            .unprojected_tail(85),
            0
        );
        assert_eq!(
            SsdPlus {
                enabled: false,
                rho_stop: 0.5
            }
            .unprojected_tail(85),
            0
        );
    }

    #[test]
    fn config_validation() {
        let s = NoiseSchedule::default();
        assert!(RestorationConfig::default().validate(&s).is_ok());
        let bad = RestorationConfig {
            steps_gen: 1,
            ..Default::default()
        };
        assert!(bad.validate(&s).is_err());
        let bad = RestorationConfig {
            ssd_plus: SsdPlus {
                enabled: true,
                rho_stop: 1.5,
            },
            ..Default::default()
        };
        assert!(bad.validate(&s).is_err());
    }
}
