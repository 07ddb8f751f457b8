use std::fs;
use std::path::{Path, PathBuf};

use vpsde::cli::{load_config, main_with_args, run, Command, ConfigError, ExperimentConfig, OUTPUT_DIR_ENV};

const MINIMAL: &str = "[[target.components]]\nmean = [2.0]\n";

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn args(command: &str, config: &Path, sets: &[String]) -> Vec<String> {
    let mut a = vec!["vpsde".to_string(), command.to_string(), "--config".into(), config.display().to_string()];
    for s in sets {
        a.push("--set".into());
        a.push(s.clone());
    }
    a
}

#[test]
fn config_errors_name_the_problem() {
    let err = ExperimentConfig::from_toml_str(&format!("sigma = -1.0\n{MINIMAL}"), &[]).unwrap_err();
    assert!(matches!(&err, ConfigError::Invalid { field, .. } if field == "sigma"), "{err}");

    let err = ExperimentConfig::from_toml_str(&format!("betaa = 1.0\n{MINIMAL}"), &[]).unwrap_err();
    assert!(err.to_string().contains("betaa"), "{err}");
    let err = ExperimentConfig::from_toml_str(&format!("[schedule]\nkind = \"constant\"\nbetaa = 1.0\n{MINIMAL}"), &[])
        .unwrap_err();
    assert!(err.to_string().contains("betaa"), "{err}");

    let err = ExperimentConfig::from_toml_str("sigma = 1.0\nhorizon = = 2\n", &[]).unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");

    let err = ExperimentConfig::from_toml_str(MINIMAL, &["n_steps=3".into()]).unwrap_err();
    assert!(err.to_string().contains("n_steps"), "{err}");
    let err = ExperimentConfig::from_toml_str(MINIMAL, &["schedule.beta=0".into()]).unwrap_err();
    assert!(err.to_string().contains("schedule"), "{err}");
}

#[test]
fn defaults_are_echoed_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("output_dir = \"{}\"\n{MINIMAL}\n[covering]\nepsilons = [0.8]\n", dir.path().display());
    let cfg = ExperimentConfig::from_toml_str(&text, &[]).unwrap();
    let outcome = run(Command::Covering, &cfg).unwrap();
    assert!(outcome.passed);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("covering_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["sigma"], 1.0);
    assert_eq!(manifest["config"]["n_steps"], 400);
    assert_eq!(manifest["config"]["schedule"]["kind"], "constant");
    assert_eq!(manifest["config"]["verify"]["envelope_samples"], 1_000_000);
    assert_eq!(manifest["outputs"][0], "covering.csv");
    assert!(manifest["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    let csv = fs::read_to_string(dir.path().join("covering.csv")).unwrap();
    assert_eq!(csv, "epsilon,cover_size,product_bound,holds\n8.0000000000000004e-1,7,12,true\n");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(main_with_args(["vpsde", "sample", "--config", "/nonexistent/config.toml"]), 2);
    assert_eq!(main_with_args(["vpsde", "resample", "--config", "x.toml"]), 2);
    assert_eq!(main_with_args(["vpsde", "sample"]), 2);
    assert_eq!(main_with_args(["vpsde", "--help"]), 0);
    let default = configs_dir().join("default.toml");
    assert_eq!(main_with_args(args("sample", &default, &["sigma=-2".into()])), 2);
}

#[test]
fn verify_on_default_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = format!("output_dir=\"{}\"", dir.path().display());
    assert_eq!(main_with_args(args("verify", &configs_dir().join("default.toml"), &[out])), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.len() >= 8);
    assert!(checks.iter().all(|c| c["pass"] == true && c["violations"] == 0));
}

#[test]
fn sample_gaussian_has_mean_two() {
    let dir = tempfile::tempdir().unwrap();
    let sets = vec![format!("output_dir=\"{}\"", dir.path().display()), "n_particles=20000".into()];
    assert_eq!(main_with_args(args("sample", &configs_dir().join("gaussian.toml"), &sets)), 0);
    let csv = fs::read_to_string(dir.path().join("samples.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x_0"));
    let xs: Vec<f64> = lines.map(|l| l.parse().unwrap()).collect();
    assert_eq!(xs.len(), 20_000);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    assert!((mean - 2.0).abs() < 4.0 / (xs.len() as f64).sqrt(), "{mean}");
}

#[test]
fn failed_checks_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let sets = vec![
        format!("output_dir=\"{}\"", dir.path().display()),
        "n_particles=2000".into(),
        "mixing.horizons=[1.0, 2.0]".into(),
        "mixing.steps_per_unit=20".into(),
        "mixing.max_ratio=1e-9".into(),
    ];
    assert_eq!(main_with_args(args("mixing", &configs_dir().join("gaussian.toml"), &sets)), 1);
    let csv = fs::read_to_string(dir.path().join("mixing.csv")).unwrap();
    assert!(csv.starts_with("T,measured_kl,bound,ratio\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn output_dir_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, format!("output_dir = \"ignored\"\n{MINIMAL}")).unwrap();
    let target = dir.path().join("from-env");
    // Only this test touches the variable.
    unsafe { std::env::set_var(OUTPUT_DIR_ENV, &target) };
    let cfg = load_config(&path, &[]).unwrap();
    unsafe { std::env::remove_var(OUTPUT_DIR_ENV) };
    assert_eq!(cfg.output_dir, target);
    assert_eq!(load_config(&path, &[]).unwrap().output_dir, PathBuf::from("ignored"));
}
