//! Noise-prediction contract and its implementations.

pub mod external;
pub mod gmm;
pub mod protocol;

use crate::error::{Result, SsdError};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub use external::ExternalDenoiserClient;
pub use gmm::GaussianMixture;

/// An epsilon-prediction model `eps(x_t, t)`.
///
/// Implementations must return a tensor of the same shape as `x_t` and be
/// deterministic for a fixed `(x_t, t)`.
pub trait Denoiser {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        (**self).predict_eps(x_t, t)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        (**self).predict_eps(x_t, t)
    }
}

/// Queries `denoiser` and checks the shape contract.
pub fn predict_checked<D: Denoiser + ?Sized>(denoiser: &D, x_t: &Tensor, t: usize) -> Result<Tensor> {
    let eps = denoiser.predict_eps(x_t, t)?;
    if eps.shape() != x_t.shape() {
        return Err(SsdError::Denoiser(format!(
            "denoiser returned shape {:?} for input {:?}",
            eps.shape(),
            x_t.shape()
        )));
    }
    Ok(eps)
}

/// Clean-image estimate from a noise prediction already in hand.
pub fn x0_from_eps(schedule: &NoiseSchedule, x_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
    if t == 0 {
        return Err(SsdError::Timestep {
            t,
            reason: "x0 prediction is undefined at t = 0",
        });
    }
    let ab = schedule.alpha_bar(t)?;
    let inv = 1.0 / ab.sqrt();
    x_t.axpby(inv, eps, -(1.0 - ab).sqrt() * inv)
}

/// `(x_t - sqrt(1 - ab_t) * eps(x_t, t)) / sqrt(ab_t)`.
pub fn f_theta<D: Denoiser + ?Sized>(schedule: &NoiseSchedule, denoiser: &D, x_t: &Tensor, t: usize) -> Result<Tensor> {
    if t == 0 {
        return Err(SsdError::Timestep {
            t,
            reason: "x0 prediction is undefined at t = 0",
        });
    }
    schedule.alpha_bar(t)?;
    let eps = predict_checked(denoiser, x_t, t)?;
    x0_from_eps(schedule, x_t, &eps, t)
}

/// Denoiser that returns the same tensor for every query.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser(pub Tensor);

impl Denoiser for ConstantDenoiser {
    fn predict_eps(&self, x_t: &Tensor, _t: usize) -> Result<Tensor> {
        x_t.ensure_same_shape(&self.0)?;
        Ok(self.0.clone())
    }
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_eps(&self, x_t: &Tensor, _t: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(x_t.shape()))
    }
}
