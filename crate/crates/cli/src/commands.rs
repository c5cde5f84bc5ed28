use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use ssd_core::denoiser::gmm::GmmDenoiser;
use ssd_core::denoiser::{Denoiser, ExternalDenoiserClient, GaussianMixture};
use ssd_core::diagnostics::{self, DeviationConfig, ExperimentReport, ReportMeta, ReportRow, SweepConfig};
use ssd_core::generation::{ssd_restore, RestorationConfig};
use ssd_core::inversion::InversionConfig;
use ssd_core::operators::{build_operator, LinearOperator};
use ssd_core::rng::{derive_seed, substream};
use ssd_core::schedule::NoiseSchedule;
use ssd_core::tensorio;
use ssd_core::toy::toy_mixture;
use ssd_core::Tensor;

use crate::config::{must_exist, parent_must_exist, require, DenoiserSection, RunConfig};
use crate::CliError;

const RAW_EXTENSION: &str = "ssdt";

fn is_raw(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == RAW_EXTENSION)
}

fn load_tensor(path: &Path) -> Result<Tensor, CliError> {
    must_exist(path, "input file")?;
    let loaded = if is_raw(path) {
        tensorio::load_raw(path)
    } else {
        tensorio::load_png(path)
    };
    loaded.map_err(CliError::config)
}

fn save_tensor(t: &Tensor, path: &Path) -> Result<(), CliError> {
    let saved = if is_raw(path) {
        tensorio::save_raw(t, path)
    } else {
        tensorio::save_png(t, path)
    };
    saved.map_err(CliError::runtime)
}

fn report_paths(stats_out: &Path) -> (PathBuf, PathBuf) {
    (stats_out.with_extension("csv"), stats_out.with_extension("json"))
}

fn write_report(report: &ExperimentReport, stats_out: &Path) -> Result<(), CliError> {
    let (csv, json) = report_paths(stats_out);
    report.write_csv(&csv).map_err(CliError::runtime)?;
    report.write_json(&json).map_err(CliError::runtime)?;
    info!(
        "wrote {} rows to {} and {}",
        report.rows.len(),
        csv.display(),
        json.display()
    );
    Ok(())
}

fn meta(cfg: &RunConfig, experiment: &str) -> ReportMeta {
    ReportMeta {
        experiment: experiment.into(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
    }
}

fn inversion_config(cfg: &RunConfig, seed: u64) -> InversionConfig {
    let base = if cfg.operator.degradation.is_colorization() {
        InversionConfig::colorization()
    } else {
        InversionConfig::default()
    };
    let inv = &cfg.inversion;
    InversionConfig {
        eta: inv.eta.unwrap_or(base.eta),
        t0: inv.t0.unwrap_or(base.t0),
        steps: inv.steps.unwrap_or(base.steps),
        rng_seed: seed,
    }
}

fn restoration_config(cfg: &RunConfig) -> RestorationConfig {
    RestorationConfig {
        inversion: inversion_config(cfg, derive_seed(cfg.seed, 0)),
        steps_gen: cfg.generation.steps,
        ddim_eta: cfg.generation.ddim_eta,
        ssd_plus: cfg.generation.ssd_plus,
        rng_seed: derive_seed(cfg.seed, 1),
    }
}

fn load_gmm(cfg: &RunConfig) -> Result<GaussianMixture, CliError> {
    let path = cfg.require_gmm_path()?;
    must_exist(path, "mixture file")?;
    GaussianMixture::load(path).map_err(CliError::config)
}

/// Denoiser chosen by the configuration, validated but not yet started.
enum Backend {
    Gmm(GaussianMixture),
    External { command: Vec<String>, timeout_ms: u64 },
}

impl Backend {
    fn from_config(cfg: &RunConfig) -> Result<Self, CliError> {
        match &cfg.denoiser {
            None => Err(CliError::Config("missing \"denoiser\" section".into())),
            Some(DenoiserSection::Gmm { .. }) => Ok(Backend::Gmm(load_gmm(cfg)?)),
            Some(DenoiserSection::External { command, timeout_ms }) => {
                if command.is_empty() {
                    return Err(CliError::Config("denoiser.command must name a program".into()));
                }
                Ok(Backend::External {
                    command: command.clone(),
                    timeout_ms: timeout_ms.unwrap_or(ssd_core::denoiser::external::DEFAULT_TIMEOUT_MS),
                })
            }
        }
    }

    fn gmm(&self) -> Option<&GaussianMixture> {
        match self {
            Backend::Gmm(g) => Some(g),
            Backend::External { .. } => None,
        }
    }

    fn check_shape(&self, image_shape: &[usize]) -> Result<(), CliError> {
        match self.gmm() {
            Some(g) if g.shape != image_shape => Err(CliError::Config(format!(
                "mixture shape {:?} does not match image shape {image_shape:?}",
                g.shape
            ))),
            _ => Ok(()),
        }
    }

    fn with<T>(
        &self,
        schedule: &NoiseSchedule,
        f: impl FnOnce(&(dyn Denoiser + Sync)) -> Result<T, CliError>,
    ) -> Result<T, CliError> {
        match self {
            Backend::Gmm(g) => f(&GmmDenoiser::new(g, schedule)),
            Backend::External { command, timeout_ms } => {
                let client = ExternalDenoiserClient::spawn(command, *timeout_ms).map_err(CliError::runtime)?;
                f(&client)
            }
        }
    }
}

/// Validated inputs shared by `restore` and `compare-inversions`.
struct SingleInput {
    schedule: NoiseSchedule,
    backend: Backend,
    operator: LinearOperator,
    y: Tensor,
    reference: Option<Tensor>,
}

fn prepare_single(cfg: &RunConfig) -> Result<SingleInput, CliError> {
    let schedule = cfg.schedule()?;
    cfg.operator.validate().map_err(CliError::config)?;
    let input = load_tensor(require(&cfg.io.input, "input")?)?;
    let mut reference = cfg.io.reference.as_deref().map(load_tensor).transpose()?;
    let backend = Backend::from_config(cfg)?;
    let degradation = &cfg.operator.degradation;
    let (operator, y) = if cfg.io.degrade_input {
        let op = build_operator(degradation, input.shape()).map_err(CliError::config)?;
        let (y, sigma) = op
            .degrade(&input, cfg.operator.noise, &mut substream(cfg.seed, 2))
            .map_err(CliError::config)?;
        info!("degraded input with {} (noise std {sigma:.4})", op.label());
        reference.get_or_insert(input);
        (op, y)
    } else {
        let shape = degradation.image_shape_for(input.shape()).map_err(CliError::config)?;
        (build_operator(degradation, &shape).map_err(CliError::config)?, input)
    };
    backend.check_shape(operator.in_shape())?;
    if let Some(r) = &reference {
        r.ensure_shape(operator.in_shape())
            .map_err(|e| CliError::Config(format!("reference image: {e}")))?;
    }
    Ok(SingleInput {
        schedule,
        backend,
        operator,
        y,
        reference,
    })
}

#[derive(Serialize)]
struct RestoreSummary<'a> {
    metadata: &'a ReportMeta,
    residual_inf: f64,
    psnr: Option<f64>,
    rows: &'a [ReportRow],
}

pub fn restore(cfg: &RunConfig) -> Result<(), CliError> {
    let input = prepare_single(cfg)?;
    let output = require(&cfg.io.output, "output")?;
    parent_must_exist(output)?;
    let stats_out = cfg.io.stats_out.as_deref();
    if let Some(p) = stats_out {
        parent_must_exist(p)?;
    }
    let rcfg = restoration_config(cfg);
    rcfg.validate(&input.schedule).map_err(CliError::config)?;

    let result = input.backend.with(&input.schedule, |den| {
        ssd_restore(&input.schedule, den, &input.operator, &input.y, &rcfg).map_err(CliError::runtime)
    })?;
    let residual_inf = input
        .operator
        .apply(&result.x)
        .and_then(|hx| hx.max_abs_diff(&input.y))
        .map_err(CliError::runtime)?;
    save_tensor(&result.x, output)?;
    info!(
        "restored {} -> {} (|Hx - y|_inf = {residual_inf:.3e})",
        input.operator.label(),
        output.display()
    );

    let mut rows: Vec<ReportRow> = result
        .stats
        .records
        .iter()
        .map(|r| ReportRow {
            mean: Some(r.mean),
            variance: Some(r.variance),
            kl: Some(r.kl),
            ..ReportRow::new("inversion", r.t_to)
        })
        .collect();
    let mut last = ReportRow::new("restored", 0);
    if let Some(reference) = &input.reference {
        last.psnr = Some(diagnostics::psnr(&result.x, reference, 2.0).map_err(CliError::runtime)?);
        last.l2 = Some(diagnostics::l2_distance(&result.x, reference).map_err(CliError::runtime)?);
    }
    let psnr = last.psnr;
    rows.push(last);
    if let Some(stats_out) = stats_out {
        let report = ExperimentReport {
            metadata: meta(cfg, "restore"),
            rows,
        };
        let (csv, json) = report_paths(stats_out);
        report.write_csv(&csv).map_err(CliError::runtime)?;
        let summary = RestoreSummary {
            metadata: &report.metadata,
            residual_inf,
            psnr,
            rows: &report.rows,
        };
        let text = serde_json::to_string_pretty(&summary).map_err(CliError::runtime)?;
        std::fs::write(&json, text).map_err(|e| CliError::Runtime(format!("{}: {e}", json.display())))?;
    }
    Ok(())
}

pub fn compare_inversions(cfg: &RunConfig) -> Result<(), CliError> {
    let input = prepare_single(cfg)?;
    let stats_out = require(&cfg.io.stats_out, "stats_out")?;
    parent_must_exist(stats_out)?;
    let inv = inversion_config(cfg, 0);
    inv.validate(&input.schedule).map_err(CliError::config)?;
    ssd_core::schedule::make_grid(&input.schedule, cfg.generation.steps, inv.t0).map_err(CliError::config)?;

    let rows = input.backend.with(&input.schedule, |den| {
        diagnostics::compare_inversions(
            &input.schedule,
            den,
            input.backend.gmm(),
            &input.operator,
            &input.y,
            &inv,
            cfg.generation.steps,
            cfg.generation.ddim_eta,
            cfg.seed,
        )
        .map_err(CliError::runtime)
    })?;
    write_report(
        &ExperimentReport {
            metadata: meta(cfg, "compare_inversions"),
            rows,
        },
        stats_out,
    )
}

pub fn deviation(cfg: &RunConfig) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    let gmm = load_gmm(cfg)?;
    let stats_out = require(&cfg.io.stats_out, "stats_out")?;
    parent_must_exist(stats_out)?;
    let dev = &cfg.deviation;
    if dev.severities.is_empty() || dev.n_samples == 0 {
        return Err(CliError::Config("deviation needs severities and n_samples >= 1".into()));
    }
    for s in &dev.severities {
        s.validate().map_err(CliError::config)?;
        build_operator(&s.degradation, &gmm.shape).map_err(CliError::config)?;
    }
    let dcfg = DeviationConfig {
        inversion: inversion_config(cfg, derive_seed(cfg.seed, 0)),
        seed: cfg.seed,
    };
    dcfg.inversion.validate(&schedule).map_err(CliError::config)?;

    let result = diagnostics::deviation_experiment(&gmm, &schedule, &dev.severities, dev.n_samples, &dcfg)
        .map_err(CliError::runtime)?;
    for c in &result.curves {
        info!(
            "{}: mean KL ddim {:.4}, da {:.4}",
            c.label,
            c.mean_ddim_kl(),
            c.mean_da_kl()
        );
    }
    let report = ExperimentReport {
        metadata: meta(cfg, "deviation"),
        rows: result.report.rows,
    };
    write_report(&report, stats_out)
}

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    let gmm = load_gmm(cfg)?;
    let stats_out = require(&cfg.io.stats_out, "stats_out")?;
    parent_must_exist(stats_out)?;
    cfg.operator.validate().map_err(CliError::config)?;
    let op = build_operator(&cfg.operator.degradation, &gmm.shape).map_err(CliError::config)?;
    let sw = &cfg.sweep;
    if sw.n_images == 0 || sw.eta_grid.is_empty() || sw.t0_grid.is_empty() {
        return Err(CliError::Config("sweep needs n_images >= 1 and nonempty grids".into()));
    }
    let base = inversion_config(cfg, 0);
    for &t0 in &sw.t0_grid {
        for &eta in &sw.eta_grid {
            InversionConfig { eta, t0, ..base }
                .validate(&schedule)
                .map_err(CliError::config)?;
        }
        ssd_core::schedule::make_grid(&schedule, cfg.generation.steps, t0).map_err(CliError::config)?;
    }

    let ys = (0..sw.n_images as u64)
        .map(|j| {
            let x = gmm.sample(&mut substream(cfg.seed, j));
            op.degrade(&x, cfg.operator.noise, &mut substream(cfg.seed, (1 << 32) + j))
                .map(|(y, _)| y)
        })
        .collect::<ssd_core::Result<Vec<_>>>()
        .map_err(CliError::runtime)?;
    let scfg = SweepConfig {
        steps_inv: base.steps,
        steps_gen: cfg.generation.steps,
        ddim_eta: cfg.generation.ddim_eta,
        seed: cfg.seed,
    };
    let report = diagnostics::tradeoff_sweep(&gmm, &schedule, &op, &ys, &sw.eta_grid, &sw.t0_grid, &scfg)
        .map_err(CliError::runtime)?;
    write_report(
        &ExperimentReport {
            metadata: meta(cfg, "tradeoff_sweep"),
            rows: report.rows,
        },
        stats_out,
    )
}

pub fn make_toy(cfg: &RunConfig) -> Result<(), CliError> {
    let mt = &cfg.make_toy;
    let gmm = match &mt.gmm {
        Some(g) => {
            g.validate().map_err(CliError::config)?;
            g.clone()
        }
        None => toy_mixture(&mt.toy).map_err(CliError::config)?,
    };
    if mt.n_samples == 0 {
        return Err(CliError::Config("make_toy.n_samples must be >= 1".into()));
    }
    if mt.gmm_out.is_none() && mt.samples_out.is_none() && mt.png_dir.is_none() {
        return Err(CliError::Config(
            "make_toy needs at least one of gmm_out, samples_out, png_dir".into(),
        ));
    }
    for p in [&mt.gmm_out, &mt.samples_out].into_iter().flatten() {
        parent_must_exist(p)?;
    }
    if let Some(dir) = &mt.png_dir {
        if !dir.is_dir() {
            return Err(CliError::Config(format!("png_dir does not exist: {}", dir.display())));
        }
        if !matches!(gmm.shape.as_slice(), [_, _, 1] | [_, _, 3]) {
            return Err(CliError::Config(format!(
                "PNG output needs an [h, w, 1|3] mixture, got {:?}",
                gmm.shape
            )));
        }
    }

    let samples: Vec<Tensor> = (0..mt.n_samples as u64)
        .map(|j| gmm.sample(&mut substream(cfg.seed, j)))
        .collect();
    if let Some(dir) = &mt.png_dir {
        for (j, s) in samples.iter().enumerate() {
            tensorio::save_png(s, dir.join(format!("sample_{j:05}.png"))).map_err(CliError::runtime)?;
        }
    }
    if let Some(path) = &mt.samples_out {
        let mut shape = vec![mt.n_samples];
        shape.extend_from_slice(&gmm.shape);
        let data = samples.iter().flat_map(|s| s.data().iter().copied()).collect();
        let stacked = Tensor::new(shape, data).map_err(CliError::runtime)?;
        tensorio::save_raw(&stacked, path).map_err(CliError::runtime)?;
    }
    if let Some(path) = &mt.gmm_out {
        gmm.save(path).map_err(CliError::runtime)?;
    }
    info!(
        "sampled {} images from a {}-component mixture of shape {:?}",
        mt.n_samples,
        gmm.components(),
        gmm.shape
    );
    Ok(())
}
