//! Variance schedule and timestep grids.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SsdError};
use crate::tensor::Tensor;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Discrete variance schedule.
///
/// `alphas_cum[t]` is the cumulative product of `1 - beta_i` for `i <= t`,
/// with `alphas_cum[0] = 1` so that `t = 0` denotes the clean image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit betas (`betas[i]` is `beta_{i+1}`).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(SsdError::invalid("schedule needs at least 2 steps"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(SsdError::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alphas_cum = Vec::with_capacity(betas.len() + 1);
        alphas_cum.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cum.push(acc);
        }
        Ok(Self { betas, alphas_cum })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cum(&self) -> &[f64] {
        &self.alphas_cum
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.total_steps() {
            return Err(SsdError::Timestep {
                t,
                reason: "beta is defined for 1..=T",
            });
        }
        Ok(self.betas[t - 1])
    }

    /// Cumulative `alpha_bar_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cum.get(t).copied().ok_or(SsdError::Timestep {
            t,
            reason: "beyond schedule length",
        })
    }

    /// Effective one-jump variance between two grid levels,
    /// `1 - alpha_bar(t_to) / alpha_bar(t_from)`.
    pub fn beta_eff(&self, t_from: usize, t_to: usize) -> Result<f64> {
        if t_from >= t_to {
            return Err(SsdError::invalid(format!(
                "beta_eff needs t_from < t_to, got {t_from} -> {t_to}"
            )));
        }
        Ok(1.0 - self.alpha_bar(t_to)? / self.alpha_bar(t_from)?)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        linear_beta_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// Linearly spaced betas including both endpoints.
pub fn linear_beta_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(SsdError::invalid(format!("T must be >= 2, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_end < 1.0) {
        return Err(SsdError::invalid(format!(
            "beta endpoints must lie in (0, 1), got [{beta_start}, {beta_end}]"
        )));
    }
    if beta_start > beta_end {
        return Err(SsdError::invalid(format!(
            "beta_start {beta_start} exceeds beta_end {beta_end}"
        )));
    }
    let last = (steps - 1) as f64;
    let betas = (0..steps)
        .map(|i| {
            let f = i as f64 / last;
            beta_start * (1.0 - f) + beta_end * f
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// Strictly increasing timesteps from `0` to the shortcut timestep `t0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepGrid {
    taus: Vec<usize>,
}

impl TimestepGrid {
    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn t0(&self) -> usize {
        *self.taus.last().expect("grid is never empty")
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Consecutive `(t_from, t_to)` pairs walking up the grid.
    pub fn ascending_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.taus.windows(2).map(|w| (w[0], w[1]))
    }

    /// Consecutive `(t_from, t_to)` pairs walking down the grid.
    pub fn descending_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.taus.windows(2).rev().map(|w| (w[1], w[0]))
    }
}

/// `steps` uniformly spaced points over `[0, t0]`, rounded half up.
pub fn make_grid(schedule: &NoiseSchedule, steps: usize, t0: usize) -> Result<TimestepGrid> {
    if t0 < 1 || t0 >= schedule.total_steps() {
        return Err(SsdError::invalid(format!(
            "t0 must satisfy 1 <= t0 < T = {}, got {t0}",
            schedule.total_steps()
        )));
    }
    if steps < 2 {
        return Err(SsdError::invalid(format!("grid needs >= 2 points, got {steps}")));
    }
    if steps > t0 + 1 {
        return Err(SsdError::invalid(format!(
            "cannot place {steps} distinct integer points in [0, {t0}]"
        )));
    }
    let denom = 2 * (steps - 1);
    let mut taus: Vec<usize> = (0..steps).map(|i| (2 * i * t0 + steps - 1) / denom).collect();
    taus.dedup();
    debug_assert!(taus.windows(2).all(|w| w[0] < w[1]));
    debug_assert_eq!(taus.first(), Some(&0));
    debug_assert_eq!(taus.last(), Some(&t0));
    Ok(TimestepGrid { taus })
}

/// Forward noising `sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_endpoints_are_exact() {
        let s = linear_beta_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas()[0], 1e-4);
        assert_eq!(s.betas()[999], 0.02);
        assert_eq!(s.alphas_cum()[0], 1.0);
        assert!(s.alphas_cum().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn two_step_schedule_by_hand() {
        let s = linear_beta_schedule(2, 0.1, 0.3).unwrap();
        let expected = [1.0, 0.9, 0.63];
        for (a, e) in s.alphas_cum().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn cumulative_product_consistency() {
        let s = NoiseSchedule::default();
        for t in 1..=s.total_steps() {
            let ratio = s.alpha_bar(t).unwrap() / s.alpha_bar(t - 1).unwrap();
            let want = 1.0 - s.beta(t).unwrap();
            assert!(((ratio - want) / want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(linear_beta_schedule(1, 1e-4, 0.02).is_err());
        assert!(linear_beta_schedule(10, 0.0, 0.02).is_err());
        assert!(linear_beta_schedule(10, 1e-4, 1.0).is_err());
        assert!(linear_beta_schedule(10, 0.3, 0.2).is_err());
    }

    #[test]
    fn grid_examples() {
        let s = NoiseSchedule::default();
        assert_eq!(make_grid(&s, 2, 550).unwrap().taus(), &[0, 550]);
        assert_eq!(make_grid(&s, 5, 550).unwrap().taus(), &[0, 138, 275, 413, 550]);
        let dense = make_grid(&s, 551, 550).unwrap();
        assert_eq!(dense.taus(), (0..=550).collect::<Vec<_>>().as_slice());
        assert!(make_grid(&s, 552, 550).is_err());
        assert!(make_grid(&s, 5, 0).is_err());
        assert!(make_grid(&s, 5, 1000).is_err());
    }

    #[test]
    fn grid_pairs_walk_both_ways() {
        let s = NoiseSchedule::default();
        let g = make_grid(&s, 3, 10).unwrap();
        assert_eq!(g.ascending_pairs().collect::<Vec<_>>(), vec![(0, 5), (5, 10)]);
        assert_eq!(g.descending_pairs().collect::<Vec<_>>(), vec![(10, 5), (5, 0)]);
    }

    #[test]
    fn q_sample_cases() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let eps = Tensor::new(vec![3], vec![1.0, 2.0, -1.0]).unwrap();
        assert_eq!(q_sample(&s, &x0, 0, &eps).unwrap(), x0);

        // a schedule whose last level has alpha_bar = 0.25
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        let y = q_sample(&s, &Tensor::scalar(1.0), 2, &Tensor::scalar(-1.0)).unwrap();
        assert!((y.data()[0] - (-0.366025403784)).abs() < 1e-9);

        // vanishing alpha_bar returns the noise
        let s = NoiseSchedule::from_betas(vec![0.999999; 40]).unwrap();
        let y = q_sample(&s, &x0, 40, &eps).unwrap();
        assert!(y.max_abs_diff(&eps).unwrap() < 1e-12);

        assert!(q_sample(&s, &x0, 41, &eps).is_err());
        assert!(q_sample(&s, &x0, 1, &Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn q_sample_moments_monte_carlo() {
        let s = NoiseSchedule::default();
        let n = 100_000;
        let t = 400;
        let ab = s.alpha_bar(t).unwrap();
        let x0 = Tensor::filled(&[n], 0.7);
        let eps = rng::standard_normal(&mut rng::seeded(11), &[n]);
        let xt = q_sample(&s, &x0, t, &eps).unwrap();
        let mean = xt.mean();
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - ab.sqrt() * 0.7).abs() < 4.0 * se_mean);
        assert!((var - want_var).abs() < 4.0 * se_var);
    }

    proptest::proptest! {
        #[test]
        fn grid_is_strict_with_exact_endpoints(t0 in 1usize..999, frac in 0.0f64..1.0) {
            let s = NoiseSchedule::default();
            let steps = 2 + ((t0 - 1) as f64 * frac) as usize;
            let g = make_grid(&s, steps, t0).unwrap();
            proptest::prop_assert_eq!(g.len(), steps);
            proptest::prop_assert_eq!(g.taus()[0], 0);
            proptest::prop_assert_eq!(g.t0(), t0);
            proptest::prop_assert!(g.taus().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
