//! Noise-deviation and quality metrics, plus the two experiment drivers:
//! per-severity KL curves and the `eta` x `t0` trade-off sweep.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, GaussianMixture};
use crate::error::{Result, SsdError};
use crate::generation::generate;
use crate::inversion::{invert_from, InversionConfig, InversionMethod};
use crate::operators::{build_operator, DegradationSpec, LinearOperator};
use crate::rng::{derive_seed, seeded, substream};
use crate::schedule::{make_grid, NoiseSchedule};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;

/// Sample mean and unbiased sample variance.
pub fn sample_moments(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(SsdError::invalid("moments need at least two samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(SsdError::NonFinite("moment samples"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let ss: f64 = samples.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((mean, ss / (n - 1.0)))
}

/// `KL(N(mu, var) || N(0, 1))`.
pub fn kl_from_moments(mean: f64, variance: f64) -> Result<f64> {
    if variance.is_nan() || variance <= 0.0 {
        return Err(SsdError::invalid(format!(
            "variance {variance} is degenerate for the Gaussian fit"
        )));
    }
    Ok((0.5 * (variance + mean * mean - 1.0 - variance.ln())).max(0.0))
}

/// Moment-matched Gaussian estimate of the KL divergence to `N(0, 1)`.
pub fn kl_to_standard_normal(samples: &[f64]) -> Result<f64> {
    let (m, v) = sample_moments(samples)?;
    kl_from_moments(m, v)
}

pub fn mse(x: &Tensor, reference: &Tensor) -> Result<f64> {
    x.ensure_same_shape(reference)?;
    let ss: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ss / x.len() as f64)
}

/// Euclidean distance `||x - reference||_2`.
pub fn l2_distance(x: &Tensor, reference: &Tensor) -> Result<f64> {
    Ok(x.sub(reference)?.norm())
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(SsdError::invalid(format!("peak {peak} must be positive")));
    }
    let m = mse(x, reference)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub timestep: usize,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub kl: Option<f64>,
    pub psnr: Option<f64>,
    pub l2: Option<f64>,
    pub nll: Option<f64>,
}

impl ReportRow {
    pub fn new(condition: impl Into<String>, timestep: usize) -> Self {
        Self {
            condition: condition.into(),
            timestep,
            mean: None,
            variance: None,
            kl: None,
            psnr: None,
            l2: None,
            nll: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub experiment: String,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metadata: ReportMeta,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)
                .map_err(|e| SsdError::invalid(format!("csv encoding failed: {e}")))?;
        }
        if self.rows.is_empty() {
            w.write_record(["condition", "timestep", "mean", "variance", "kl", "psnr", "l2", "nll"])
                .map_err(|e| SsdError::invalid(format!("csv encoding failed: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| SsdError::invalid(format!("csv encoding failed: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| SsdError::invalid(format!("json encoding failed: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv()?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json()?)
    }

    pub fn rows_for<'a>(&'a self, condition: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.condition == condition)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| SsdError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| SsdError::io(path, e))
}

#[cfg(feature = "parallel")]
fn par_map<T: Send, F: Fn(usize) -> Result<T> + Sync + Send>(n: usize, f: F) -> Result<Vec<T>> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F: Fn(usize) -> Result<T>>(n: usize, f: F) -> Result<Vec<T>> {
    (0..n).map(f).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviationConfig {
    pub inversion: InversionConfig,
    pub seed: u64,
}

/// Per-step KL curves for one severity, averaged over samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityCurves {
    pub label: String,
    pub timesteps: Vec<usize>,
    pub ddim_kl: Vec<f64>,
    pub da_kl: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl SeverityCurves {
    pub fn mean_ddim_kl(&self) -> f64 {
        mean(&self.ddim_kl)
    }

    pub fn mean_da_kl(&self) -> f64 {
        mean(&self.da_kl)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationResult {
    pub curves: Vec<SeverityCurves>,
    pub report: ExperimentReport,
}

/// Samples clean images from `gmm`, degrades each with every severity, and
/// records per-step noise statistics under DDIM and DA inversion.
pub fn deviation_experiment(
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
    severities: &[DegradationSpec],
    n_samples: usize,
    cfg: &DeviationConfig,
) -> Result<DeviationResult> {
    if severities.is_empty() || n_samples == 0 {
        return Err(SsdError::invalid("deviation experiment needs severities and samples"));
    }
    cfg.inversion.validate(schedule)?;
    let operators = severities
        .iter()
        .map(|s| {
            s.validate()?;
            build_operator(&s.degradation, &gmm.shape)
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<Tensor> = (0..n_samples)
        .map(|i| gmm.sample(&mut substream(cfg.seed, i as u64)))
        .collect();
    let denoiser = crate::denoiser::gmm::GmmDenoiser::new(gmm, schedule);
    let cells = severities.len() * n_samples;

    // Each cell: (per-step records for DDIM, per-step records for DA).
    let results = par_map(cells, |cell| {
        let (s, i) = (cell / n_samples, cell % n_samples);
        let op = &operators[s];
        let mut noise_rng = substream(derive_seed(cfg.seed, 1 << 32 | s as u64), i as u64);
        let (y, _) = op.degrade(&samples[i], severities[s].noise, &mut noise_rng)?;
        let start = op.pinv_apply(&y)?;
        let inv = InversionConfig {
            rng_seed: derive_seed(cfg.seed, (s * n_samples + i) as u64 + (1 << 40)),
            ..cfg.inversion
        };
        let (_, ddim) = invert_from(schedule, &denoiser, &start, &inv, InversionMethod::Ddim)?;
        let (_, da) = invert_from(schedule, &denoiser, &start, &inv, InversionMethod::Da)?;
        Ok((ddim, da))
    })?;

    let grid = make_grid(schedule, cfg.inversion.steps, cfg.inversion.t0)?;
    let timesteps: Vec<usize> = grid.taus()[1..].to_vec();
    let n_steps = timesteps.len();
    let mut curves = Vec::with_capacity(severities.len());
    let mut rows = Vec::new();
    for (s, spec) in severities.iter().enumerate() {
        let label = spec.degradation.label();
        let cell = &results[s * n_samples..(s + 1) * n_samples];
        let mut ddim_kl = vec![0.0; n_steps];
        let mut da_kl = vec![0.0; n_steps];
        for (name, pick, out) in [("ddim", 0usize, &mut ddim_kl), ("da", 1usize, &mut da_kl)] {
            for k in 0..n_steps {
                let recs: Vec<_> = cell
                    .iter()
                    .map(|(a, b)| if pick == 0 { a.records[k] } else { b.records[k] })
                    .collect();
                let m = recs.len() as f64;
                let kl = recs.iter().map(|r| r.kl).sum::<f64>() / m;
                out[k] = kl;
                let mut row = ReportRow::new(format!("{label}/{name}"), timesteps[k]);
                row.mean = Some(recs.iter().map(|r| r.mean).sum::<f64>() / m);
                row.variance = Some(recs.iter().map(|r| r.variance).sum::<f64>() / m);
                row.kl = Some(kl);
                rows.push(row);
            }
        }
        curves.push(SeverityCurves {
            label,
            timesteps: timesteps.clone(),
            ddim_kl,
            da_kl,
        });
    }
    Ok(DeviationResult {
        curves,
        report: ExperimentReport {
            metadata: ReportMeta {
                experiment: "deviation".into(),
                seed: cfg.seed,
                config_digest: String::new(),
            },
            rows,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub steps_inv: usize,
    pub steps_gen: usize,
    pub ddim_eta: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            steps_inv: 15,
            steps_gen: 85,
            ddim_eta: 0.0,
            seed: 0,
        }
    }
}

/// Output of inverting with DA and regenerating without projection.
#[derive(Debug, Clone)]
pub struct UnguidedRun {
    pub x: Tensor,
    pub mean_kl: f64,
}

/// Inversion with `method` followed by plain DDIM generation from the same `t0`.
#[allow(clippy::too_many_arguments)]
pub fn invert_and_generate<D: Denoiser + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    start: &Tensor,
    inversion: &InversionConfig,
    method: InversionMethod,
    steps_gen: usize,
    ddim_eta: f64,
    gen_seed: u64,
) -> Result<UnguidedRun> {
    let (x_t0, stats) = invert_from(schedule, denoiser, start, inversion, method)?;
    let grid = make_grid(schedule, steps_gen, inversion.t0)?;
    let mut rng = seeded(gen_seed);
    let (x, _) = generate(schedule, denoiser, &x_t0, &grid, ddim_eta, None, &mut rng)?;
    Ok(UnguidedRun {
        x,
        mean_kl: stats.mean_kl(),
    })
}

/// Faithfulness (mean L2 to `H^+ y`) against realism (mean GMM NLL) over an
/// `eta` x `t0` grid, using DA inversion and unguided generation. Image `j`
/// uses the same random streams in every cell.
#[allow(clippy::too_many_arguments)]
pub fn tradeoff_sweep(
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
    operator: &LinearOperator,
    ys: &[Tensor],
    eta_grid: &[f64],
    t0_grid: &[usize],
    cfg: &SweepConfig,
) -> Result<ExperimentReport> {
    if ys.is_empty() || eta_grid.is_empty() || t0_grid.is_empty() {
        return Err(SsdError::invalid("trade-off sweep needs inputs and nonempty grids"));
    }
    let starts = ys.iter().map(|y| operator.pinv_apply(y)).collect::<Result<Vec<_>>>()?;
    for &t0 in t0_grid {
        for &eta in eta_grid {
            InversionConfig {
                eta,
                t0,
                steps: cfg.steps_inv,
                rng_seed: 0,
            }
            .validate(schedule)?;
        }
        make_grid(schedule, cfg.steps_gen, t0)?;
    }
    let denoiser = crate::denoiser::gmm::GmmDenoiser::new(gmm, schedule);
    let n_img = ys.len();
    let per_cell = eta_grid.len() * t0_grid.len();
    let runs = par_map(per_cell * n_img, |idx| {
        let (cell, j) = (idx / n_img, idx % n_img);
        let (e, t) = (cell / t0_grid.len(), cell % t0_grid.len());
        let inv = InversionConfig {
            eta: eta_grid[e],
            t0: t0_grid[t],
            steps: cfg.steps_inv,
            rng_seed: derive_seed(cfg.seed, j as u64),
        };
        let run = invert_and_generate(
            schedule,
            &denoiser,
            &starts[j],
            &inv,
            InversionMethod::Da,
            cfg.steps_gen,
            cfg.ddim_eta,
            derive_seed(cfg.seed, j as u64 + (1 << 32)),
        )?;
        Ok((
            crate::diagnostics::l2_distance(&run.x, &starts[j])?,
            gmm.nll(&run.x)?,
            run.mean_kl,
        ))
    })?;
    let mut rows = Vec::with_capacity(per_cell);
    for (cell, chunk) in runs.chunks(n_img).enumerate() {
        let (e, t) = (cell / t0_grid.len(), cell % t0_grid.len());
        let m = n_img as f64;
        let mut row = ReportRow::new(format!("eta={}", eta_grid[e]), t0_grid[t]);
        row.l2 = Some(chunk.iter().map(|c| c.0).sum::<f64>() / m);
        row.nll = Some(chunk.iter().map(|c| c.1).sum::<f64>() / m);
        row.kl = Some(chunk.iter().map(|c| c.2).sum::<f64>() / m);
        rows.push(row);
    }
    Ok(ExperimentReport {
        metadata: ReportMeta {
            experiment: "tradeoff_sweep".into(),
            seed: cfg.seed,
            config_digest: String::new(),
        },
        rows,
    })
}

/// Sweep rows as a `[eta][t0]` table of `(l2, nll)`.
pub fn sweep_table(report: &ExperimentReport, n_eta: usize, n_t0: usize) -> Vec<Vec<(f64, f64)>> {
    (0..n_eta)
        .map(|e| {
            (0..n_t0)
                .map(|t| {
                    let r = &report.rows[e * n_t0 + t];
                    (r.l2.unwrap_or(f64::NAN), r.nll.unwrap_or(f64::NAN))
                })
                .collect()
        })
        .collect()
}

/// One row per inversion method: faithfulness, realism surrogate and mean KL.
#[allow(clippy::too_many_arguments)]
pub fn compare_inversions<D: Denoiser + Sync + ?Sized>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    gmm: Option<&GaussianMixture>,
    operator: &LinearOperator,
    y: &Tensor,
    inversion: &InversionConfig,
    steps_gen: usize,
    ddim_eta: f64,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    let start = operator.pinv_apply(y)?;
    InversionMethod::ALL
        .iter()
        .map(|&method| {
            let inv = InversionConfig {
                rng_seed: derive_seed(seed, 0),
                ..*inversion
            };
            let run = invert_and_generate(
                schedule,
                denoiser,
                &start,
                &inv,
                method,
                steps_gen,
                ddim_eta,
                derive_seed(seed, 1),
            )?;
            let mut row = ReportRow::new(method.name(), inversion.t0);
            row.kl = Some(run.mean_kl);
            row.l2 = Some(l2_distance(&run.x, &start)?);
            row.nll = gmm.map(|g| g.nll(&run.x)).transpose()?;
            Ok(row)
        })
        .collect()
}
