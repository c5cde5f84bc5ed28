use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use ssd_core::denoiser::GaussianMixture;
use ssd_core::tensorio;
use ssd_core::toy::{toy_mixture, ToyConfig};

fn ssd(dir: &Path, args: &[&str], config: &Value) -> Output {
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    Command::new(env!("CARGO_BIN_EXE_ssd"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--quiet")
        .current_dir(dir)
        .env_remove("SSD_NUM_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

/// Writes the default toy mixture and four sample PNGs into `dir`.
fn toy_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = ssd(
        dir.path(),
        &["make-toy"],
        &json!({"make_toy": {"n_samples": 4, "gmm_out": "gmm.json", "png_dir": "."}}),
    );
    assert_ok(&out);
    dir
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["condition", "timestep", "mean", "variance", "kl", "psnr", "l2", "nll"]
    );
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

fn gmm_denoiser() -> Value {
    json!({"kind": "gmm", "gmm_path": "gmm.json"})
}

#[test]
fn missing_input_is_a_config_error_naming_the_path() {
    let dir = toy_workspace();
    let out = ssd(
        dir.path(),
        &["restore"],
        &json!({"denoiser": gmm_denoiser(), "io": {"input": "nowhere/y.png", "output": "x.png"}}),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere/y.png"), "{}", stderr(&out));
    assert!(!dir.path().join("x.png").exists());
}

#[test]
fn unknown_keys_and_bad_values_exit_2() {
    let dir = toy_workspace();
    for cfg in [
        json!({"denoiser": gmm_denoiser(), "inversion": {"etta": 0.4}}),
        json!({"denoiser": gmm_denoiser(), "inversion": {"eta": 1.5}, "io": {"input": "sample_00000.png", "output": "x.png"}}),
        json!({"io": {"input": "sample_00000.png", "output": "x.png"}}),
    ] {
        let out = ssd(dir.path(), &["restore"], &cfg);
        assert_eq!(out.status.code(), Some(2), "{cfg}: {}", stderr(&out));
    }
    let out = Command::new(env!("CARGO_BIN_EXE_ssd"))
        .args(["sweep", "--config", "run.json"])
        .current_dir(dir.path())
        .env("SSD_NUM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failing_external_denoiser_is_a_runtime_error() {
    let dir = toy_workspace();
    let out = ssd(
        dir.path(),
        &["restore"],
        &json!({
            "denoiser": {"kind": "external", "command": ["/nonexistent/denoiser"]},
            "io": {"input": "sample_00000.png", "output": "x.png", "degrade_input": true}
        }),
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn restore_writes_consistent_image_and_stats() {
    let dir = toy_workspace();
    let out = ssd(
        dir.path(),
        &["restore"],
        &json!({
            "denoiser": gmm_denoiser(),
            "generation": {"steps": 30},
            "io": {"input": "sample_00001.png", "output": "x.ssdt", "stats_out": "stats", "degrade_input": true}
        }),
    );
    assert_ok(&out);
    let x = tensorio::load_raw(dir.path().join("x.ssdt")).unwrap();
    assert_eq!(x.shape(), &[16, 16, 1]);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("stats.json")).unwrap()).unwrap();
    assert!(summary["residual_inf"].as_f64().unwrap() < 1e-6);
    assert!(summary["psnr"].as_f64().unwrap() > 10.0);
    let rows = csv_rows(&dir.path().join("stats.csv"));
    assert_eq!(rows.iter().filter(|r| r[0] == "inversion").count(), 14);
    assert_eq!(rows.last().unwrap()[0], "restored");
}

#[test]
fn restore_accepts_a_low_resolution_measurement() {
    let dir = toy_workspace();
    let gmm = GaussianMixture::load(dir.path().join("gmm.json")).unwrap();
    let y = ssd_core::operators::build_operator(&ssd_core::operators::Degradation::SrBicubic { scale: 2 }, &gmm.shape)
        .unwrap()
        .apply(&ssd_core::Tensor::new(gmm.shape.clone(), gmm.means[0].clone()).unwrap())
        .unwrap();
    tensorio::save_raw(&y, dir.path().join("y.ssdt")).unwrap();
    let out = ssd(
        dir.path(),
        &["restore"],
        &json!({"denoiser": gmm_denoiser(), "generation": {"steps": 20}, "io": {"input": "y.ssdt", "output": "x.png"}}),
    );
    assert_ok(&out);
    assert_eq!(
        tensorio::load_png(dir.path().join("x.png")).unwrap().shape(),
        &[16, 16, 1]
    );
}

fn sweep_config() -> Value {
    json!({
        "denoiser": gmm_denoiser(),
        "operator": {"degradation": {"kind": "sr_bicubic", "scale": 4}},
        "generation": {"steps": 20},
        "sweep": {"eta_grid": [0.0, 0.5, 1.0], "t0_grid": [400, 550, 750], "n_images": 2},
        "seed": 11,
        "io": {"stats_out": "sweep"}
    })
}

#[test]
fn sweep_grid_rows_and_byte_identical_rerun() {
    let dir = toy_workspace();
    assert_ok(&ssd(dir.path(), &["sweep"], &sweep_config()));
    let first = std::fs::read(dir.path().join("sweep.csv")).unwrap();
    let rows = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| !r[6].is_empty() && !r[7].is_empty()));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(report["metadata"]["seed"], 11);
    assert_eq!(report["metadata"]["config_digest"].as_str().unwrap().len(), 64);

    assert_ok(&ssd(dir.path(), &["sweep"], &sweep_config()));
    assert_eq!(std::fs::read(dir.path().join("sweep.csv")).unwrap(), first);

    assert_ok(&ssd(dir.path(), &["sweep", "--seed", "12"], &sweep_config()));
    assert_ne!(std::fs::read(dir.path().join("sweep.csv")).unwrap(), first);
}

#[test]
fn compare_inversions_emits_three_method_rows() {
    let dir = toy_workspace();
    let out = ssd(
        dir.path(),
        &["compare-inversions"],
        &json!({
            "denoiser": gmm_denoiser(),
            "generation": {"steps": 20},
            "io": {"input": "sample_00002.png", "degrade_input": true, "stats_out": "cmp"}
        }),
    );
    assert_ok(&out);
    let rows = csv_rows(&dir.path().join("cmp.csv"));
    let methods: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(methods, ["ddim", "ddpm", "da"]);
    assert!(rows
        .iter()
        .all(|r| r[6].parse::<f64>().is_ok() && r[7].parse::<f64>().is_ok()));
}

#[test]
fn identity_deviation_settles_near_standard_normal() {
    let dir = toy_workspace();
    let out = ssd(
        dir.path(),
        &["deviation"],
        &json!({
            "denoiser": gmm_denoiser(),
            "deviation": {"severities": [{"degradation": {"kind": "identity"}}], "n_samples": 8},
            "io": {"stats_out": "dev"}
        }),
    );
    assert_ok(&out);
    let rows = csv_rows(&dir.path().join("dev.csv"));
    let kl = |cond: &str| -> Vec<f64> {
        rows.iter()
            .filter(|r| r[0] == cond)
            .map(|r| r[4].parse().unwrap())
            .collect()
    };
    let (ddim, da) = (kl("identity/ddim"), kl("identity/da"));
    assert_eq!(ddim.len(), 14);
    assert!(ddim.iter().chain(&da).all(|&k| k >= 0.0));
    assert!(*ddim.last().unwrap() < 0.01 && *da.last().unwrap() < 0.01);
}

#[test]
fn make_toy_unit_gaussian_mean_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = 16;
    let cfg = json!({
        "seed": 5,
        "make_toy": {
            "gmm": {"shape": [4, 4, 1], "weights": [1.0], "means": [vec![0.0; d]], "variances": [vec![1.0; d]]},
            "n_samples": 10000,
            "samples_out": "s.ssdt"
        }
    });
    assert_ok(&ssd(dir.path(), &["make-toy"], &cfg));
    let s = tensorio::load_raw(dir.path().join("s.ssdt")).unwrap();
    assert_eq!(s.shape(), &[10000, 4, 4, 1]);
    let se = (1.0 / s.len() as f64).sqrt();
    assert!(s.mean().abs() < 4.0 * se, "mean {} vs se {se}", s.mean());

    let first = std::fs::read(dir.path().join("s.ssdt")).unwrap();
    assert_ok(&ssd(dir.path(), &["make-toy"], &cfg));
    assert_eq!(std::fs::read(dir.path().join("s.ssdt")).unwrap(), first);
}

#[test]
fn emitted_mixture_round_trips_through_the_loader() {
    let dir = toy_workspace();
    let path: PathBuf = dir.path().join("gmm.json");
    let loaded = GaussianMixture::load(&path).unwrap();
    assert_eq!(loaded, toy_mixture(&ToyConfig::default()).unwrap());
    let again = dir.path().join("again.json");
    loaded.save(&again).unwrap();
    assert_eq!(GaussianMixture::load(&again).unwrap(), loaded);
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&path).unwrap());
}
