//! Run configuration file. Every section rejects unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ssd_core::denoiser::GaussianMixture;
use ssd_core::generation::SsdPlus;
use ssd_core::operators::{Degradation, DegradationSpec};
use ssd_core::schedule::{linear_beta_schedule, NoiseSchedule};
use ssd_core::toy::ToyConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default = "default_operator")]
    pub operator: DegradationSpec,
    #[serde(default)]
    pub inversion: InversionSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub denoiser: Option<DenoiserSection>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub io: IoSection,
    #[serde(default)]
    pub deviation: DeviationSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub make_toy: MakeToySection,
}

fn default_operator() -> DegradationSpec {
    DegradationSpec::noiseless(Degradation::SrBicubic { scale: 2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            t: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Inversion settings. Missing `eta`/`t0` fall back to the defaults for the
/// configured operator (colorization uses a stronger, longer inversion).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionSection {
    pub eta: Option<f64>,
    pub t0: Option<usize>,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    pub steps: usize,
    pub ddim_eta: f64,
    pub ssd_plus: SsdPlus,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            steps: 85,
            ddim_eta: 0.0,
            ssd_plus: SsdPlus::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSection {
    Gmm {
        gmm_path: PathBuf,
    },
    External {
        command: Vec<String>,
        #[serde(default)]
        timeout_ms: Option<u64>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub stats_out: Option<PathBuf>,
    /// Clean image for PSNR/L2 in the restore statistics.
    pub reference: Option<PathBuf>,
    /// Treat `input` as a clean image and degrade it with `operator` first.
    pub degrade_input: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviationSection {
    pub severities: Vec<DegradationSpec>,
    pub n_samples: usize,
}

impl Default for DeviationSection {
    fn default() -> Self {
        let sr = |scale| DegradationSpec::noiseless(Degradation::SrBicubic { scale });
        Self {
            severities: vec![DegradationSpec::noiseless(Degradation::Identity), sr(2), sr(4), sr(8)],
            n_samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub eta_grid: Vec<f64>,
    pub t0_grid: Vec<usize>,
    pub n_images: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            eta_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            t0_grid: vec![400, 550, 750],
            n_images: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MakeToySection {
    /// Procedural mixture; ignored when `gmm` is given.
    pub toy: ToyConfig,
    /// Explicit mixture to sample from.
    pub gmm: Option<GaussianMixture>,
    pub n_samples: usize,
    pub gmm_out: Option<PathBuf>,
    /// All samples stacked as one `[n, ...shape]` raw tensor.
    pub samples_out: Option<PathBuf>,
    /// Directory for one PNG per sample.
    pub png_dir: Option<PathBuf>,
}

impl Default for MakeToySection {
    fn default() -> Self {
        Self {
            toy: ToyConfig::default(),
            gmm: None,
            n_samples: 16,
            gmm_out: None,
            samples_out: None,
            png_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let s = &self.schedule;
        linear_beta_schedule(s.t, s.beta_start, s.beta_end).map_err(CliError::config)
    }

    /// SHA-256 over the canonical JSON of the effective configuration.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn require_gmm_path(&self) -> Result<&Path, CliError> {
        match &self.denoiser {
            Some(DenoiserSection::Gmm { gmm_path }) => Ok(gmm_path),
            Some(DenoiserSection::External { .. }) => Err(CliError::Config(
                "this command needs an analytic denoiser (kind \"gmm\")".into(),
            )),
            None => Err(CliError::Config("missing \"denoiser\" section".into())),
        }
    }
}

pub fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("missing required key io.{key}")))
}

pub fn must_exist(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} not found: {}", path.display())))
    }
}

/// Output files may not exist yet, but their directory must.
pub fn parent_must_exist(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(CliError::Config(format!(
            "output directory does not exist: {}",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_takes_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.schedule.t, 1000);
        assert_eq!(cfg.generation.steps, 85);
        assert_eq!(cfg.sweep.eta_grid.len() * cfg.sweep.t0_grid.len(), 15);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"sede": 1}"#,
            r#"{"inversion": {"etta": 0.4}}"#,
            r#"{"generation": {"ssd_plus": {"enabled": true, "rho": 0.2}}}"#,
            r#"{"denoiser": {"kind": "gmm", "gmm_path": "a", "x": 1}}"#,
            r#"{"schedule": {"t": 1000, "beta_start": 0.0001, "beta_end": 0.02}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn digest_tracks_content() {
        let a: RunConfig = serde_json::from_str("{}").unwrap();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
