use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sharelora::data::{load_bundle, load_dataset};
use sharelora::harness::read_sweep_csv;
use sharelora::mdp::{best_response_dp, expected_features, occupancy, RewardTable};
use sharelora::reward::load_checkpoint;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sharelora"));
    c.env_remove("SHARELORA_OUT_DIR").env_remove("SHARELORA_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const SMALL: &str = r#"{
  "dims": {"d1": 4, "d2": 2, "n_users": 3, "k_true": 1, "k_model": 1},
  "spectrum": {"leading": [3.0]},
  "mdp": {"n_states": 3, "n_actions": 2, "horizon": 2, "feature_scale": 2.0},
  "data": {"n_pairs": 30, "test_fraction": 0.2},
  "train": {"epochs": 40, "warmup_epochs": 10, "learning_rate": 0.5, "grad_tol": 0.0},
  "plan": {"fw_iters": 300, "gap_tol": 1e-4},
  "seed": 5
}"#;

struct Workdir {
    dir: tempfile::TempDir,
}

impl Workdir {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).display().to_string()
    }

    fn synth(&self, name: &str) {
        stdout_json(&run(&["synth", "--config", &self.s("cfg.json"), "--out", &self.s(name)]));
    }
}

#[test]
fn synth_writes_a_loadable_deterministic_dataset() {
    let w = Workdir::new();
    w.synth("a.json");
    w.synth("b.json");
    let ds = load_dataset::<f64>(&w.p("a.json")).unwrap();
    assert_eq!((ds.n_users(), ds.n_pairs()), (3, 30));
    assert_eq!(std::fs::read(w.p("a.json")).unwrap(), std::fs::read(w.p("b.json")).unwrap());
    let other = run(&["synth", "--config", &w.s("cfg.json"), "--seed", "6", "--out", &w.s("c.json")]);
    assert!(other.status.success());
    assert_ne!(std::fs::read(w.p("a.json")).unwrap(), std::fs::read(w.p("c.json")).unwrap());
}

#[test]
fn out_dir_comes_from_the_environment() {
    let w = Workdir::new();
    let out = bin().env("SHARELORA_OUT_DIR", w.dir.path()).args(["synth", "--config", &w.s("cfg.json")]).output().unwrap();
    assert!(out.status.success());
    assert!(w.p("dataset.json").exists());
}

#[test]
fn oversized_rank_is_a_validation_error() {
    let w = Workdir::new();
    let bad = SMALL.replace("\"k_model\": 1", "\"k_model\": 5");
    std::fs::write(w.p("bad.json"), bad).unwrap();
    let out = run(&["synth", "--config", &w.s("bad.json"), "--out", &w.s("x.json")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dims.k_model"));
    assert!(!w.p("x.json").exists());
}

#[test]
fn parse_errors_name_the_field() {
    let w = Workdir::new();
    std::fs::write(w.p("bad.json"), r#"{"dims": {"d1": "four"}}"#).unwrap();
    let out = run(&["synth", "--config", &w.s("bad.json")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dims.d1"));
}

#[test]
fn exit_codes_for_io_and_usage() {
    let missing = run(&["train", "--data", "/nonexistent/data.json"]);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

fn train(w: &Workdir, extra: &[&str], out: &str) -> Value {
    let cfg = w.s("cfg.json");
    let data = w.s("data.json");
    let out = w.s(out);
    let mut args = vec!["train", "--config", cfg.as_str(), "--data", data.as_str(), "--out", out.as_str()];
    args.extend(extra);
    stdout_json(&run(&args))
}

#[test]
fn train_variants_and_baselines() {
    let w = Workdir::new();
    w.synth("data.json");
    let si = train(&w, &["--variant", "si"], "si.json");
    assert_eq!(si["report"]["warmup_boundary"], 0);
    assert_eq!(si["report"]["epochs_run"], 40);
    assert_eq!(si["report"]["log_likelihood"].as_array().unwrap().len(), 40);
    assert!(si["dist_b"].as_f64().is_some());
    let wu = train(&w, &["--variant", "wu"], "wu.json");
    assert_eq!(wu["report"]["warmup_boundary"], 10);
    let unknown = run(&["train", "--config", &w.s("cfg.json"), "--data", &w.s("data.json"), "--variant", "x"]);
    assert_eq!(unknown.status.code(), Some(1));

    let full_warmup = SMALL.replace("\"warmup_epochs\": 10", "\"warmup_epochs\": 40");
    std::fs::write(w.p("cfg.json"), full_warmup).unwrap();
    let g = train(&w, &["--variant", "g"], "g.json");
    let global = train(&w, &["--algo", "global"], "global.json");
    assert_eq!(g["ll_final"].as_f64(), global["ll_final"].as_f64());
    assert!(load_checkpoint::<f64>(&w.p("global.json")).is_ok());
}

#[test]
fn plan_reports_and_zero_zeta_matches_greedy() {
    let w = Workdir::new();
    w.synth("data.json");
    train(&w, &[], "ckpt.json");
    let plan = |scale: &str, out: &str| {
        stdout_json(&run(&[
            "plan",
            "--config",
            &w.s("cfg.json"),
            "--data",
            &w.s("data.json"),
            "--checkpoint",
            &w.s("ckpt.json"),
            "--zeta-scale",
            scale,
            "--out",
            &w.s(out),
        ]))
    };
    let summary = plan("1.0", "plan.json");
    assert!(summary["zeta"].as_f64().unwrap() > 0.0);
    let reports: Value = serde_json::from_str(&std::fs::read_to_string(w.p("plan.json")).unwrap()).unwrap();
    for r in reports.as_array().unwrap() {
        assert!(r["fw_gap"].as_f64().unwrap() <= 1e-4);
        assert!(r["value_gap"].as_f64().unwrap() >= -1e-12);
    }

    plan("0", "plan0.json");
    let reports: Value = serde_json::from_str(&std::fs::read_to_string(w.p("plan0.json")).unwrap()).unwrap();
    let bundle = load_bundle::<f64>(&w.p("data.json")).unwrap();
    let ckpt = load_checkpoint::<f64>(&w.p("ckpt.json")).unwrap();
    let phi_ref = expected_features(&bundle.mdp, &occupancy(&bundle.mdp, &bundle.mu0).unwrap());
    for (i, r) in reports.as_array().unwrap().iter().enumerate() {
        let theta = ckpt.theta(i);
        let (_, best) = best_response_dp(&bundle.mdp, &RewardTable::linear(&bundle.mdp, &theta).unwrap());
        let expect = best - theta.inner(&phi_ref);
        assert!((r["pess_value"].as_f64().unwrap() - expect).abs() < 1e-12, "user {i}");
        assert_eq!(r["zeta"].as_f64(), Some(0.0));
    }
}

#[test]
fn plan_rejects_nonlinear_heads() {
    let w = Workdir::new();
    let tanh = SMALL.replace("\"seed\": 5", "\"seed\": 5, \"head\": {\"kind\": \"tanh\", \"range\": 2.0}");
    std::fs::write(w.p("cfg.json"), tanh).unwrap();
    w.synth("data.json");
    train(&w, &[], "ckpt.json");
    let out = run(&["plan", "--config", &w.s("cfg.json"), "--data", &w.s("data.json"), "--checkpoint", &w.s("ckpt.json")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported"));
}

fn sweep_config(dir: &Path, grid: &str) -> PathBuf {
    let base: Value = serde_json::from_str(SMALL).unwrap();
    let grid: Value = serde_json::from_str(grid).unwrap();
    let cfg = serde_json::json!({ "base": base, "grid": grid, "seeds": [1, 2] });
    let path = dir.join("sweep.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn sweep_is_deterministic_and_parsable() {
    let w = Workdir::new();
    let cfg = sweep_config(w.dir.path(), r#"{"n_pairs": [20, 40], "algo": ["share-left", "local"]}"#);
    let a = stdout_json(&run(&["sweep", "--config", cfg.to_str().unwrap(), "--out", &w.s("a.csv"), "--threads", "2"]));
    assert_eq!(a["rows"], 8);
    stdout_json(&run(&["sweep", "--config", cfg.to_str().unwrap(), "--out", &w.s("b.csv"), "--threads", "1"]));
    assert_eq!(std::fs::read(w.p("a.csv")).unwrap(), std::fs::read(w.p("b.csv")).unwrap());
    let rows = read_sweep_csv(&w.p("a.csv")).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.error.is_empty()));
    assert!(rows[0].dist_b.is_finite() && rows[2].dist_b.is_nan());
}

#[test]
fn one_cell_sweep_has_one_row() {
    let w = Workdir::new();
    let cfg = sweep_config(w.dir.path(), "{}");
    let cfg_text = std::fs::read_to_string(&cfg).unwrap().replace("\"seeds\":[1,2]", "\"seeds\":[3]");
    std::fs::write(&cfg, cfg_text).unwrap();
    stdout_json(&run(&["sweep", "--config", cfg.to_str().unwrap(), "--out", &w.s("one.csv")]));
    let text = std::fs::read_to_string(w.p("one.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn check_passes_on_a_fresh_build() {
    let out = run(&["check"]);
    let report = stdout_json(&out);
    assert_eq!(report["passed"], true);
    assert_eq!(out.status.code(), Some(0));
}
