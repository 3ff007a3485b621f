use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sharelora::data::{load_bundle, save_bundle, DatasetBundle};
use sharelora::diagnostics::{davis_kahan_ratio, pref_accuracy, subspace_error};
use sharelora::harness::{
    build_instance, checkpoint_log_likelihood, run_checks, run_sweep, train_algo, zeta_for, Algo, CheckOptions, ExperimentConfig,
    Instance, SweepConfig,
};
use sharelora::reward::{load_checkpoint, save_checkpoint, Checkpoint};
use sharelora::train::{TrainReport, Variant};
use sharelora::{write_json_pretty, Error, Result};

const OUT_DIR_ENV: &str = "SHARELORA_OUT_DIR";
const THREADS_ENV: &str = "SHARELORA_THREADS";

#[derive(Parser)]
#[command(name = "sharelora", version, about = "Personalized preference reward learning with a shared low-rank adapter")]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; relative names resolve against $SHARELORA_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw an instance and write its preference dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a reward model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// share-left, share-right, local, global, or full.
        #[arg(long)]
        algo: Option<String>,
        /// si, g, or wu.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Plan pessimistically for every user of a trained model.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        zeta_scale: Option<f64>,
    },
    /// Run a grid of seeded pipelines and write one CSV row per cell.
    Sweep {
        /// Sweep configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite and print a JSON verdict.
    Check {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_path(out: Option<PathBuf>, default_name: &str) -> PathBuf {
    let path = out.unwrap_or_else(|| PathBuf::from(default_name));
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path,
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_json<S: Serialize>(value: &S) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

#[derive(Serialize)]
struct SynthSummary<'a> {
    out: String,
    n_users: usize,
    n_pairs: usize,
    nu: f64,
    tail: f64,
    spectrum: &'a [f64],
    truth_scale: f64,
    /// `max_i ‖Θᵢ*‖_F · sup ‖F(τ)‖_F`.
    reward_bound: f64,
    config_digest: &'a str,
}

fn cmd_synth(common: Common) -> Result<()> {
    let cfg = load_config(&common)?;
    let Instance { mdp, truth, mu0, mu1, dataset } = build_instance(&cfg)?;
    let out = output_path(common.out, "dataset.json");
    let max_theta = (0..truth.n_users()).map(|i| truth.theta_star(i).frobenius()).fold(0.0, f64::max);
    let reward_bound = max_theta * mdp.feature_bound() * mdp.horizon() as f64;
    let digest = dataset.provenance.config_digest.clone();
    let bundle = DatasetBundle { dataset, truth, mdp, mu0, mu1 };
    save_bundle(&bundle, &out)?;
    let div = &bundle.truth.diversity;
    print_json(&SynthSummary {
        out: out.display().to_string(),
        n_users: bundle.dataset.n_users(),
        n_pairs: bundle.dataset.n_pairs(),
        nu: div.nu,
        tail: div.tail,
        spectrum: &div.spectrum,
        truth_scale: bundle.truth.scale,
        reward_bound,
        config_digest: &digest,
    });
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    algo: Algo,
    variant: Variant,
    checkpoint: String,
    n_train_pairs: usize,
    ll_final: f64,
    heldout_accuracy: Option<f64>,
    dist_b: Option<f64>,
    dk_ratio: Option<f64>,
    report: TrainReport,
}

fn parse_variant(s: &str) -> Result<Variant> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| Error::Validation { field: "variant".into(), msg: format!("unknown variant `{s}` (si, g, wu)") })
}

fn cmd_train(common: Common, data: PathBuf, algo: Option<String>, variant: Option<String>) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(a) = algo {
        cfg.algo = Algo::parse(&a)?;
    }
    if let Some(v) = variant {
        cfg.train.variant = parse_variant(&v)?;
    }
    cfg.validate()?;
    let bundle = load_bundle::<f64>(&data)?;
    let (train, test) = bundle.dataset.split_holdout(cfg.data.test_fraction)?;
    let (ckpt, report) = train_algo(cfg.algo, &cfg, &bundle.truth.theta_init, &train)?;
    let out = output_path(common.out, "checkpoint.json");
    save_checkpoint(&ckpt, &out)?;
    let accuracy = match (&ckpt, test.is_empty()) {
        (_, true) => None,
        (Checkpoint::Shared(m), false) => Some(pref_accuracy(m, &test)?.mean),
        (Checkpoint::Baseline(m), false) => Some(pref_accuracy(m, &test)?.mean),
    };
    let (dist_b, dk_ratio) = match &ckpt {
        Checkpoint::Shared(m) => (Some(subspace_error(m, &bundle.truth)?.dist), davis_kahan_ratio(m, &bundle.truth).ok()),
        Checkpoint::Baseline(_) => (None, None),
    };
    print_json(&TrainSummary {
        algo: cfg.algo,
        variant: cfg.train.variant,
        checkpoint: out.display().to_string(),
        n_train_pairs: train.n_pairs(),
        ll_final: checkpoint_log_likelihood(&ckpt, &train)?,
        heldout_accuracy: accuracy,
        dist_b,
        dk_ratio,
        report,
    });
    Ok(())
}

fn cmd_plan(common: Common, data: PathBuf, checkpoint: PathBuf, zeta_scale: Option<f64>) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(z) = zeta_scale {
        cfg.plan.zeta_scale = z;
    }
    cfg.validate()?;
    let bundle = load_bundle::<f64>(&data)?;
    let ckpt = load_checkpoint::<f64>(&checkpoint)?;
    if ckpt.n_users() != bundle.dataset.n_users() {
        return Err(Error::Validation { field: "checkpoint".into(), msg: "user count differs from the dataset".into() });
    }
    let n_train = bundle.dataset.split_holdout(cfg.data.test_fraction)?.0.n_pairs();
    let zeta = zeta_for(&cfg, &bundle.truth, n_train)?;
    let DatasetBundle { dataset, truth, mdp, mu0, mu1 } = bundle;
    let inst = Instance { mdp, truth, mu0, mu1, dataset };
    let plans = sharelora::harness::plan_checkpoint(&cfg, &inst, &ckpt, zeta)?;
    let reports: Vec<_> = plans.into_iter().map(|(r, _)| r).collect();
    let out = output_path(common.out, "plan.json");
    write_json_pretty(&out, &reports)?;
    let unconverged: Vec<usize> = reports.iter().filter(|r| r.fw_gap > cfg.plan.gap_tol).map(|r| r.user).collect();
    print_json(&serde_json::json!({
        "out": out.display().to_string(),
        "zeta": zeta,
        "zeta_scale": cfg.plan.zeta_scale,
        "users": reports.len(),
        "mean_value_gap": reports.iter().filter_map(|r| r.value_gap).sum::<f64>() / reports.len().max(1) as f64,
        "fw_gap_max": reports.iter().map(|r| r.fw_gap).fold(0.0, f64::max),
        "fw_gap_above_tol": unconverged,
    }));
    Ok(())
}

fn cmd_sweep(config: PathBuf, out: Option<PathBuf>, threads: Option<usize>) -> Result<()> {
    let mut cfg = SweepConfig::load(&config)?;
    if threads.is_some() {
        cfg.threads = threads;
    }
    let out = output_path(out, "sweep.csv");
    let rows = run_sweep(&cfg, &out)?;
    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    print_json(&serde_json::json!({ "out": out.display().to_string(), "rows": rows.len(), "failed_cells": failed }));
    Ok(())
}

fn cmd_check(seed: Option<u64>, out: Option<PathBuf>) -> Result<bool> {
    let report = run_checks(&CheckOptions { seed: seed.unwrap_or(0), ..CheckOptions::default() });
    if let Some(path) = out {
        write_json_pretty(&output_path(Some(path), "check.json"), &report)?;
    }
    print_json(&report);
    Ok(report.passed)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Validation { field: "threads".into(), msg: "must be at least 1".into() });
        }
        if !matches!(cli.command, Command::Sweep { .. }) {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        }
    }
    match cli.command {
        Command::Synth { common } => cmd_synth(common)?,
        Command::Train { common, data, algo, variant } => cmd_train(common, data, algo, variant)?,
        Command::Plan { common, data, checkpoint, zeta_scale } => cmd_plan(common, data, checkpoint, zeta_scale)?,
        Command::Sweep { config, out } => cmd_sweep(config, out, cli.threads)?,
        Command::Check { seed, out } => {
            if !cmd_check(seed, out)? {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
