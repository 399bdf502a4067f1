//! End-to-end stage runs through the output directory.

mod common;

use std::fs;
use std::path::{Path, PathBuf};

use rpickle::diagnostics::linear_oracle;
use rpickle::io::{read_csv, read_json};
use rpickle::pickle::LossParams;
use rpickle::pipeline::{read_ensemble, run_oracle_suite, sigma_label, Pipeline, RunConfig, Stage};
use serde_json::{json, Value};

use common::{config, designed_config, pipeline};

fn linear_config(seed: u64, grid: &[f64], n_ens: usize) -> Value {
    json!({
        "seed": seed,
        "problem": "linear",
        "sigma_r_sq_grid": grid,
        "rpickle": {"n_ens": n_ens, "metropolize": false},
    })
}

fn small_darcy(smoothing: usize) -> Value {
    let mut cfg = designed_config(json!({"n_xi": 4, "n_eta": 4}));
    cfg["n_mc"] = json!(300);
    cfg["smoothing_iterations"] = json!(smoothing);
    cfg
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn run_all(p: &Pipeline, stages: &[Stage]) -> Vec<String> {
    stages.iter().flat_map(|&s| p.run(s).unwrap().warnings).collect()
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(small_darcy(10), &a, None).run(Stage::Generate).unwrap();
    pipeline(small_darcy(10), &b, Some(3)).run(Stage::Generate).unwrap();
    for f in ["case.json", "mesh.json", "fields/reference.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn smoothing_never_raises_the_energy_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let n95 = |k: usize| {
        let out = dir.path().join(format!("k{k}"));
        let p = pipeline(small_darcy(k), &out, None);
        run_all(&p, &[Stage::Generate, Stage::BuildPrior]);
        let prior: Value = read_json::<Value>(&out.join("prior.json")).unwrap().data;
        prior["n_xi_95"].as_u64().unwrap()
    };
    let (raw, smooth) = (n95(0), n95(30));
    assert!(smooth <= raw, "{smooth} terms after smoothing vs {raw} before");
}

#[test]
fn missing_dirichlet_value_is_named() {
    let mut cfg = small_darcy(0);
    cfg["mesh"]["bc_values"].as_object_mut().unwrap().remove("west");
    let err = RunConfig::from_json(&cfg.to_string()).unwrap_err().to_string();
    assert!(err.contains("mesh.bc_values") && err.contains("west"), "{err}");
    let mut cfg = small_darcy(0);
    cfg["mesh"]["sides"] = json!({"west": "neumann", "east": "neumann", "south": "neumann", "north": "neumann"});
    let err = RunConfig::from_json(&cfg.to_string()).unwrap_err().to_string();
    assert!(err.contains("mesh.sides"), "{err}");
}

#[test]
fn linear_map_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let grid = [0.5, 0.05];
    let p = pipeline(linear_config(81, &grid, 10), dir.path(), None);
    run_all(&p, &[Stage::Generate, Stage::BuildPrior, Stage::Map]);
    let lm = p.load_linear().unwrap();
    for s in grid {
        let (mu, _) = linear_oracle(&lm, &LossParams::new(s)).unwrap();
        let map = p.load_map(s).expect("map file").coefficients().stacked();
        assert!((map - mu).amax() <= 1e-6, "sigma_r_sq {s}");
    }
}

#[test]
fn single_member_ensemble_warns_in_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(linear_config(82, &[0.5], 1), dir.path(), None);
    let warnings = run_all(&p, &[Stage::Generate, Stage::BuildPrior, Stage::Map, Stage::SampleRpickle, Stage::Diagnose]);
    let ens = read_ensemble(&dir.path().join(sigma_label(0.5)).join("rpickle_ensemble.csv")).unwrap();
    assert_eq!(ens.n_rows, 1);
    assert!(warnings.iter().any(|w| w.contains("moments undefined")), "{warnings:?}");
}

#[test]
fn diagnose_writes_one_row_per_residual_variance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_darcy(10);
    cfg["sigma_r_sq_grid"] = json!([1e-3, 1e-2, 1e-1]);
    cfg["rpickle"] = json!({"n_ens": 40});
    let p = pipeline(cfg, dir.path(), None);
    run_all(&p, &[Stage::Generate, Stage::BuildPrior, Stage::Map, Stage::SampleRpickle, Stage::Diagnose]);
    let (header, rows) = read_csv(&dir.path().join("diagnostics_rpickle.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    let col = header.iter().position(|h| h == "sigma_r_sq").unwrap();
    let sigmas: Vec<f64> = rows.iter().map(|r| r[col].parse().unwrap()).collect();
    assert_eq!(sigmas, vec![1e-3, 1e-2, 1e-1]);
}

#[test]
fn every_artifact_carries_the_stamp() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_darcy(10);
    cfg["sampler"] = json!("both");
    cfg["rpickle"] = json!({"n_ens": 20});
    cfg["hmc"] = json!({"n_chains": 2, "burn_in": 20, "n_samples": 20});
    cfg["oracle"] = json!({"n_ens": 200, "n_metropolis": 20});
    let p = pipeline(cfg.clone(), dir.path(), None);
    run_all(&p, &Stage::ALL);
    let hash = config(cfg).hash().unwrap();
    let stamp = format!("# config_hash={hash} seed={}", common::DESIGNED_SEED);
    for f in files(dir.path()) {
        let name = f.file_name().unwrap().to_string_lossy().to_string();
        if name == "timing.json" {
            continue;
        }
        let text = fs::read_to_string(&f).unwrap();
        if name.ends_with(".csv") {
            assert_eq!(text.lines().next(), Some(stamp.as_str()), "{}", f.display());
        } else {
            let v: Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["config_hash"], json!(hash), "{}", f.display());
            assert_eq!(v["seed"], json!(common::DESIGNED_SEED), "{}", f.display());
        }
    }
}

#[test]
fn stages_restart_from_persisted_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_darcy(10);
    pipeline(cfg.clone(), dir.path(), None).run(Stage::Generate).unwrap();
    pipeline(cfg.clone(), dir.path(), None).run(Stage::BuildPrior).unwrap();
    let fresh = pipeline(cfg.clone(), dir.path(), None);
    fresh.run(Stage::Map).unwrap();
    assert!(fresh.load_map(1e-2).is_some());
    let empty = tempfile::tempdir().unwrap();
    assert!(pipeline(cfg, empty.path(), None).run(Stage::Map).is_err());
}

#[test]
fn oracle_suite_passes_by_default_and_flags_tight_tolerance() {
    let cfg = config(linear_config(0, &[0.5], 10));
    for seed in 1..=5 {
        let report = run_oracle_suite(&cfg.linear, &cfg.oracle, &cfg.optimizer, seed).unwrap();
        assert!(report.passed, "seed {seed}: {:?}", report.checks);
    }
    let mut tight = cfg.oracle;
    tight.covariance_tolerance = 0.001;
    let report = run_oracle_suite(&cfg.linear, &tight, &cfg.optimizer, 1).unwrap();
    assert!(!report.passed);
    let failing: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert_eq!(failing, vec!["sample_covariance_rel_frobenius"]);
}

#[test]
fn oracle_stage_reports_failure_through_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = linear_config(83, &[0.5], 10);
    cfg["oracle"] = json!({"covariance_tolerance": 0.001});
    let outcome = pipeline(cfg, dir.path(), None).run(Stage::OracleCheck).unwrap();
    assert_eq!(outcome.passed, Some(false));
    let (_, rows) = read_csv(&dir.path().join("oracle_check.csv")).unwrap();
    assert!(rows.iter().any(|r| r[0] == "sample_covariance_rel_frobenius" && r[3] == "false"));
}
