//! Browser bindings for the restoration demo.
//!
//! Each export takes a JSON request and returns a JSON response, so the page
//! needs no generated type glue. The same functions are callable natively.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use ssd_core::denoiser::gmm::GmmDenoiser;
use ssd_core::diagnostics::{deviation_experiment, psnr, sweep_table, tradeoff_sweep, DeviationConfig, SweepConfig};
use ssd_core::generation::{ssd_restore, RestorationConfig, SsdPlus};
use ssd_core::inversion::InversionConfig;
use ssd_core::operators::{build_operator, Degradation, DegradationSpec, NoiseAugmentation};
use ssd_core::rng::substream;
use ssd_core::schedule::NoiseSchedule;
use ssd_core::toy::{toy_mixture, ToyConfig};
use ssd_core::Tensor;

type Result<T> = std::result::Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestoreRequest {
    pub seed: u64,
    pub channels: usize,
    pub degradation: Degradation,
    pub sigma_max: f64,
    pub eta: f64,
    pub t0: usize,
    pub steps_inv: usize,
    pub steps_gen: usize,
    pub ddim_eta: f64,
    pub ssd_plus: bool,
}

impl Default for RestoreRequest {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 1,
            degradation: Degradation::SrBicubic { scale: 2 },
            sigma_max: 0.0,
            eta: 0.4,
            t0: 550,
            steps_inv: 15,
            steps_gen: 85,
            ddim_eta: 0.0,
            ssd_plus: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RestoreResponse {
    pub shape: Vec<usize>,
    pub clean: Vec<f64>,
    /// Minimum-norm reconstruction `H^+ y`, the starting point of inversion.
    pub pinv: Vec<f64>,
    pub restored: Vec<f64>,
    pub psnr_pinv: f64,
    pub psnr_restored: f64,
    pub residual_inf: f64,
    pub inversion_kl: Vec<(usize, f64)>,
}

pub fn restore_demo(req: &RestoreRequest) -> Result<RestoreResponse> {
    let schedule = NoiseSchedule::default();
    let gmm = toy_mixture(&ToyConfig {
        channels: req.channels,
        seed: req.seed,
        ..Default::default()
    })
    .map_err(err)?;
    let op = build_operator(&req.degradation, &gmm.shape).map_err(err)?;
    let noise = (req.sigma_max > 0.0).then_some(NoiseAugmentation {
        sigma_max: req.sigma_max,
    });
    DegradationSpec {
        degradation: req.degradation.clone(),
        noise,
    }
    .validate()
    .map_err(err)?;
    let clean = gmm.sample(&mut substream(req.seed, 0));
    let (y, _) = op.degrade(&clean, noise, &mut substream(req.seed, 1)).map_err(err)?;
    let cfg = RestorationConfig {
        inversion: InversionConfig {
            eta: req.eta,
            t0: req.t0,
            steps: req.steps_inv,
            rng_seed: req.seed,
        },
        steps_gen: req.steps_gen,
        ddim_eta: req.ddim_eta,
        ssd_plus: SsdPlus {
            enabled: req.ssd_plus,
            ..SsdPlus::default()
        },
        rng_seed: req.seed.wrapping_add(1),
    };
    let den = GmmDenoiser::new(&gmm, &schedule);
    let out = ssd_restore(&schedule, &den, &op, &y, &cfg).map_err(err)?;
    let pinv = op.pinv_apply(&y).map_err(err)?;
    let residual_inf = op.apply(&out.x).and_then(|hx| hx.max_abs_diff(&y)).map_err(err)?;
    Ok(RestoreResponse {
        shape: gmm.shape.clone(),
        psnr_pinv: psnr(&pinv, &clean, 2.0).map_err(err)?,
        psnr_restored: psnr(&out.x, &clean, 2.0).map_err(err)?,
        residual_inf,
        inversion_kl: out.stats.records.iter().map(|r| (r.t_to, r.kl)).collect(),
        clean: clean.into_data(),
        pinv: pinv.into_data(),
        restored: out.x.into_data(),
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviationRequest {
    pub seed: u64,
    pub scales: Vec<usize>,
    pub n_samples: usize,
    pub eta: f64,
}

impl Default for DeviationRequest {
    fn default() -> Self {
        Self {
            seed: 0,
            scales: vec![1, 2, 4, 8],
            n_samples: 2,
            eta: 0.4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub label: String,
    pub timesteps: Vec<usize>,
    pub ddim_kl: Vec<f64>,
    pub da_kl: Vec<f64>,
}

/// Per-step KL of the predicted noise for SR at each scale (`1` is identity).
pub fn deviation_curves(req: &DeviationRequest) -> Result<Vec<Curve>> {
    let schedule = NoiseSchedule::default();
    let gmm = toy_mixture(&ToyConfig {
        seed: req.seed,
        ..Default::default()
    })
    .map_err(err)?;
    let severities: Vec<DegradationSpec> = req
        .scales
        .iter()
        .map(|&s| {
            DegradationSpec::noiseless(if s == 1 {
                Degradation::Identity
            } else {
                Degradation::SrBicubic { scale: s }
            })
        })
        .collect();
    let cfg = DeviationConfig {
        inversion: InversionConfig {
            eta: req.eta,
            rng_seed: req.seed,
            ..Default::default()
        },
        seed: req.seed,
    };
    let res = deviation_experiment(&gmm, &schedule, &severities, req.n_samples, &cfg).map_err(err)?;
    Ok(res
        .curves
        .into_iter()
        .map(|c| Curve {
            label: c.label,
            timesteps: c.timesteps,
            ddim_kl: c.ddim_kl,
            da_kl: c.da_kl,
        })
        .collect())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepRequest {
    pub seed: u64,
    pub scale: usize,
    pub eta_grid: Vec<f64>,
    pub t0_grid: Vec<usize>,
    pub n_images: usize,
    pub steps_gen: usize,
}

impl Default for SweepRequest {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 4,
            eta_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            t0_grid: vec![400, 550, 750],
            n_images: 2,
            steps_gen: 40,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResponse {
    pub eta_grid: Vec<f64>,
    pub t0_grid: Vec<usize>,
    /// `[eta][t0]` mean L2 distance to `H^+ y`.
    pub l2: Vec<Vec<f64>>,
    /// `[eta][t0]` mean negative log-likelihood under the prior.
    pub nll: Vec<Vec<f64>>,
}

pub fn sweep(req: &SweepRequest) -> Result<SweepResponse> {
    let schedule = NoiseSchedule::default();
    let gmm = toy_mixture(&ToyConfig {
        seed: req.seed,
        ..Default::default()
    })
    .map_err(err)?;
    let op = build_operator(&Degradation::SrBicubic { scale: req.scale }, &gmm.shape).map_err(err)?;
    let ys = (0..req.n_images as u64)
        .map(|j| op.apply(&gmm.sample(&mut substream(req.seed, j))))
        .collect::<ssd_core::Result<Vec<Tensor>>>()
        .map_err(err)?;
    let cfg = SweepConfig {
        steps_gen: req.steps_gen,
        seed: req.seed,
        ..Default::default()
    };
    let report = tradeoff_sweep(&gmm, &schedule, &op, &ys, &req.eta_grid, &req.t0_grid, &cfg).map_err(err)?;
    let table = sweep_table(&report, req.eta_grid.len(), req.t0_grid.len());
    Ok(SweepResponse {
        eta_grid: req.eta_grid.clone(),
        t0_grid: req.t0_grid.clone(),
        l2: table.iter().map(|r| r.iter().map(|c| c.0).collect()).collect(),
        nll: table.iter().map(|r| r.iter().map(|c| c.1).collect()).collect(),
    })
}

fn call<Req, Resp>(json: &str, f: impl FnOnce(&Req) -> Result<Resp>) -> std::result::Result<String, JsValue>
where
    Req: for<'de> Deserialize<'de>,
    Resp: Serialize,
{
    let req: Req = serde_json::from_str(json).map_err(|e| JsValue::from_str(&format!("bad request: {e}")))?;
    let resp = f(&req).map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&resp).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = restoreDemo)]
pub fn restore_demo_js(request: &str) -> std::result::Result<String, JsValue> {
    call(request, restore_demo)
}

#[wasm_bindgen(js_name = deviationCurves)]
pub fn deviation_curves_js(request: &str) -> std::result::Result<String, JsValue> {
    call(request, deviation_curves)
}

#[wasm_bindgen(js_name = tradeoffSweep)]
pub fn sweep_js(request: &str) -> std::result::Result<String, JsValue> {
    call(request, sweep)
}
