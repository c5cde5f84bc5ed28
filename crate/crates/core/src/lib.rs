//! Shortcut sampling for zero-shot image restoration with diffusion models.
//!
//! The pipeline inverts a degraded measurement `y` part of the way into the
//! diffusion process with distortion-adaptive inversion, then generates back
//! to `t = 0` while projecting every clean estimate onto `{x : Hx = y}`.
//!
//! ```
//! use ssd_core::prelude::*;
//!
//! let schedule = NoiseSchedule::default();
//! let gmm = toy_mixture(&ToyConfig::default()).unwrap();
//! let denoiser = GmmDenoiser::new(&gmm, &schedule);
//! let op = build_operator(&Degradation::SrBicubic { scale: 2 }, &gmm.shape).unwrap();
//! let x = gmm.sample(&mut ssd_core::rng::seeded(7));
//! let y = op.apply(&x).unwrap();
//! let cfg = RestorationConfig { steps_gen: 20, ..Default::default() };
//! let out = ssd_restore(&schedule, &denoiser, &op, &y, &cfg).unwrap();
//! assert!(op.apply(&out.x).unwrap().max_abs_diff(&y).unwrap() < 1e-6);
//! ```

pub mod denoiser;
pub mod diagnostics;
pub mod error;
pub mod generation;
pub mod inversion;
pub mod operators;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod tensorio;
pub mod toy;

pub use error::{Result, SsdError};
pub use tensor::Tensor;

pub mod prelude {
    pub use crate::denoiser::gmm::GmmDenoiser;
    pub use crate::denoiser::{f_theta, Denoiser, ExternalDenoiserClient, GaussianMixture};
    pub use crate::diagnostics::{kl_to_standard_normal, psnr, ExperimentReport};
    pub use crate::generation::{ssd_restore, RestorationConfig, SsdPlus};
    pub use crate::inversion::{invert, InversionConfig, InversionMethod, NoiseStats};
    pub use crate::operators::{build_operator, Degradation, DegradationSpec, LinearOperator};
    pub use crate::schedule::{linear_beta_schedule, make_grid, q_sample, NoiseSchedule};
    pub use crate::tensor::Tensor;
    pub use crate::toy::{toy_mixture, ToyConfig};
}
