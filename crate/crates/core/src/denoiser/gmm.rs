//! Diagonal-covariance Gaussian mixture with an exact posterior denoiser.
//!
//! Under `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps` with `x0` drawn from the
//! mixture, the posterior mean `E[x0 | x_t]` has a closed form, which makes
//! the mixture a noise predictor with no approximation error.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Result, SsdError};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Floor applied to component variances before they are inverted.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixture {
    /// Tensor shape of one sample; the mixture lives on the flattened vector.
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(shape: Vec<usize>, weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let gmm = Self {
            shape,
            weights,
            means,
            variances,
        };
        gmm.validate()?;
        Ok(gmm)
    }

    pub fn validate(&self) -> Result<()> {
        let d: usize = self.shape.iter().product();
        if self.shape.is_empty() || d == 0 {
            return Err(SsdError::invalid("mixture shape must be non-empty"));
        }
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(SsdError::invalid(format!(
                "mixture needs matching component counts (weights {k}, means {}, variances {})",
                self.means.len(),
                self.variances.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SsdError::invalid("mixture weights must be finite and nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SsdError::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        for (m, v) in self.means.iter().zip(&self.variances) {
            if m.len() != d || v.len() != d {
                return Err(SsdError::invalid(format!(
                    "component dimension mismatch: expected {d}, got mean {} / variance {}",
                    m.len(),
                    v.len()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(SsdError::NonFinite("mixture mean"));
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(SsdError::invalid("mixture variances must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SsdError::io(path, e))?;
        let gmm: Self = serde_json::from_str(&text).map_err(|e| SsdError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        gmm.validate()?;
        Ok(gmm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("mixture serializes");
        std::fs::write(path, text).map_err(|e| SsdError::io(path, e))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.dim() {
            return Err(SsdError::Shape {
                expected: self.shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Log responsibilities of each component for `x` observed at noise level `ab`.
    fn log_responsibilities(&self, x: &[f64], ab: f64) -> Vec<f64> {
        let sa = ab.sqrt();
        let mut logs: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(&w, (m, v))| {
                if w == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let mut acc = 0.0;
                for i in 0..x.len() {
                    let var = ab * v[i].max(VARIANCE_FLOOR) + (1.0 - ab);
                    let r = x[i] - sa * m[i];
                    acc += r * r / var + var.ln();
                }
                w.ln() - 0.5 * acc
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        for l in &mut logs {
            *l -= lse;
        }
        logs
    }

    /// Posterior mean `E[x0 | x_t]` at timestep `t >= 1`.
    pub fn posterior_mean(&self, schedule: &NoiseSchedule, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.check_input(x_t)?;
        let ab = positive_level(schedule, t)?;
        let sa = ab.sqrt();
        let x = x_t.data();
        let resp = self.log_responsibilities(x, ab);
        let mut out = vec![0.0; x.len()];
        for (lr, (m, v)) in resp.iter().zip(self.means.iter().zip(&self.variances)) {
            let r = lr.exp();
            if r == 0.0 {
                continue;
            }
            for i in 0..x.len() {
                let vi = v[i].max(VARIANCE_FLOOR);
                let var = ab * vi + (1.0 - ab);
                out[i] += r * (m[i] + sa * vi / var * (x[i] - sa * m[i]));
            }
        }
        let out = Tensor::new(x_t.shape().to_vec(), out)?;
        if !out.is_finite() {
            return Err(SsdError::NonFinite("mixture posterior mean"));
        }
        Ok(out)
    }

    /// Exact posterior noise prediction `(x_t - sqrt(ab) E[x0|x_t]) / sqrt(1 - ab)`.
    ///
    /// Evaluated per component as `sqrt(1-ab) (x_t - sqrt(ab) m_k) / (ab v_k + 1 - ab)`,
    /// which is the same quantity without the cancellation near `ab = 1`.
    pub fn predict_eps(&self, schedule: &NoiseSchedule, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.check_input(x_t)?;
        let ab = positive_level(schedule, t)?;
        let sa = ab.sqrt();
        let sn = (1.0 - ab).sqrt();
        let x = x_t.data();
        let resp = self.log_responsibilities(x, ab);
        let mut out = vec![0.0; x.len()];
        for (lr, (m, v)) in resp.iter().zip(self.means.iter().zip(&self.variances)) {
            let r = lr.exp();
            if r == 0.0 {
                continue;
            }
            for i in 0..x.len() {
                let var = ab * v[i].max(VARIANCE_FLOOR) + (1.0 - ab);
                out[i] += r * sn * (x[i] - sa * m[i]) / var;
            }
        }
        let out = Tensor::new(x_t.shape().to_vec(), out)?;
        if !out.is_finite() {
            return Err(SsdError::NonFinite("mixture noise prediction"));
        }
        Ok(out)
    }

    /// `log p(x)` under the clean-data mixture.
    pub fn log_density(&self, x: &Tensor) -> Result<f64> {
        self.check_input(x)?;
        let x = x.data();
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .filter(|(w, _)| **w > 0.0)
            .map(|(&w, (m, v))| {
                let mut acc = w.ln();
                for i in 0..x.len() {
                    let vi = v[i].max(VARIANCE_FLOOR);
                    let r = x[i] - m[i];
                    acc -= 0.5 * r * r / vi + 0.5 * vi.ln() + half_ln_2pi;
                }
                acc
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln())
    }

    pub fn nll(&self, x: &Tensor) -> Result<f64> {
        Ok(-self.log_density(x)?)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let (m, v) = (&self.means[k], &self.variances[k]);
        let data = m
            .iter()
            .zip(v)
            .map(|(&mi, &vi)| {
                let z: f64 = StandardNormal.sample(rng);
                mi + vi.sqrt() * z
            })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("mixture shape is valid")
    }
}

fn positive_level(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(SsdError::Timestep {
            t,
            reason: "no noise to predict at t = 0",
        });
    }
    schedule.alpha_bar(t)
}

/// [`GaussianMixture`] bound to a schedule, usable wherever a [`Denoiser`] is expected.
#[derive(Debug, Clone)]
pub struct GmmDenoiser<'a> {
    pub gmm: &'a GaussianMixture,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> GmmDenoiser<'a> {
    pub fn new(gmm: &'a GaussianMixture, schedule: &'a NoiseSchedule) -> Self {
        Self { gmm, schedule }
    }
}

impl Denoiser for GmmDenoiser<'_> {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.gmm.predict_eps(self.schedule, x_t, t)
    }
}

/// Free-function form of [`GaussianMixture::predict_eps`].
pub fn gmm_predict_eps(gmm: &GaussianMixture, schedule: &NoiseSchedule, x_t: &Tensor, t: usize) -> Result<Tensor> {
    gmm.predict_eps(schedule, x_t, t)
}
