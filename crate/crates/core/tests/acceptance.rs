//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits nonzero if any fails. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test -p sharelora --test acceptance -- 9 10`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;

use sharelora::data::GroundTruth;
use sharelora::harness::{build_instance, plan_checkpoint, run_cell, run_sweep, zeta_for, Algo, CellOutcome, ExperimentConfig, GridSpec, SweepConfig};
use sharelora::linalg::{optimal_rank_k, orthonormalize, principal_angle_dist, principal_angle_dist_via_complement, Matrix};
use sharelora::mdp::{make_random_mdp, occupancy, sample_trajectory, trajectory_features, MarkovPolicy, OccupancyMeasure, TabularMdp};
use sharelora::planner::{frank_wolfe_plan, pessimistic_value, ConfidenceSet, FwOptions, StepRule};
use sharelora::reward::{grad_log_likelihood, log_likelihood, BaselineKind, BaselineModel, Checkpoint, RewardHead, RewardModel, ShareMode, SharedLoraModel};
use sharelora::rng::{gaussian, stream};
use sharelora::train::{LrSchedule, Variant};
use sharelora::diagnostics::concentration_check;
use sharelora::data::{generate_dataset, synthesize_ground_truth, ThetaInitMode};

type Verdict = Result<String, String>;

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| gaussian::<f64, _>(rng))
}

fn check(ok: bool, pass: String, fail: String) -> Verdict {
    if ok {
        Ok(pass)
    } else {
        Err(fail)
    }
}

// ---- 1: gradients ----

fn finite_difference<M: RewardModel<f64>>(m: &M, ds: &sharelora::PreferenceDataset64) -> Vec<f64> {
    let h = 1e-5;
    let base = m.params();
    let mut probe = m.clone();
    let mut eval = |p: &[f64]| {
        probe.set_params(p).unwrap();
        log_likelihood(&probe, ds).unwrap()
    };
    (0..base.len())
        .map(|j| {
            let mut p = base.clone();
            p[j] = base[j] + h;
            let up = eval(&p);
            p[j] = base[j] - h;
            (up - eval(&p)) / (2.0 * h)
        })
        .collect()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

fn criterion_1() -> Verdict {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for inst in 0..20u64 {
        let mut rng = stream(inst, "acceptance-gradient", 0, 0);
        let (d1, d2, n, k) = (rng.gen_range(2..6), rng.gen_range(1..4), rng.gen_range(1..4), 1);
        let k = k + rng.gen_range(0..d1.min(d2).min(2));
        let mdp = make_random_mdp::<f64, _>(3, 2, 2, (d1, d2), 1.5, &mut rng).map_err(|e| e.to_string())?;
        let spectrum: Vec<f64> = (0..k).map(|j| 3.0 / (j + 1) as f64).collect();
        let truth = synthesize_ground_truth(d1, d2, n, k, &spectrum, ThetaInitMode::Gaussian { std: 0.3 }, 10.0, &mut rng).map_err(|e| e.to_string())?;
        let mu = MarkovPolicy::uniform(&mdp);
        for head in [RewardHead::Linear, RewardHead::Tanh { range: 1.5 }] {
            let ds = generate_dataset(&mdp, &truth, 6, &mu, &mu, &head, inst).map_err(|e| e.to_string())?;
            let mut errs = Vec::new();
            for mode in [ShareMode::ShareLeft, ShareMode::ShareRight] {
                let mut m = SharedLoraModel::init(truth.theta_init.clone(), mode, k, n, 10.0, head, inst).unwrap();
                let p: Vec<f64> = (0..m.num_params()).map(|_| 0.5 * gaussian::<f64, _>(&mut rng)).collect();
                m.set_params(&p).unwrap();
                errs.push((format!("{mode:?}"), relative_error(&grad_log_likelihood(&m, &ds).unwrap().flatten(), &finite_difference(&m, &ds))));
            }
            for kind in [BaselineKind::LoraGlobal, BaselineKind::LoraLocal, BaselineKind::FullParam] {
                let mut m = BaselineModel::init(kind, truth.theta_init.clone(), k, n, 10.0, head, inst).unwrap();
                let p: Vec<f64> = (0..m.num_params()).map(|_| 0.5 * gaussian::<f64, _>(&mut rng)).collect();
                m.set_params(&p).unwrap();
                errs.push((format!("{kind:?}"), relative_error(&grad_log_likelihood(&m, &ds).unwrap().flatten(), &finite_difference(&m, &ds))));
            }
            for (name, e) in errs {
                checked += 1;
                worst = worst.max(e);
                if !(e < 1e-6) {
                    return Err(format!("instance {inst} {head:?} {name}: relative error {e:.3e}"));
                }
            }
        }
    }
    Ok(format!("{checked} gradients, worst relative error {worst:.2e}"))
}

// ---- 2: principal angles ----

fn criterion_2() -> Verdict {
    let mut rng = stream(2, "acceptance-angles", 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.gen_range(2..=30);
        let k = rng.gen_range(1..=5.min(d));
        let b1 = orthonormalize(&gaussian_matrix(d, k, &mut rng));
        let b2 = orthonormalize(&gaussian_matrix(d, k, &mut rng));
        let a = principal_angle_dist(&b1, &b2).map_err(|e| e.to_string())?;
        let b = principal_angle_dist_via_complement(&b1, &b2).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs());
    }
    check(worst < 1e-9, format!("max disagreement {worst:.2e}"), format!("max disagreement {worst:.2e} ≥ 1e-9"))
}

// ---- 3: Eckart-Young ----

fn criterion_3() -> Verdict {
    let mut rng = stream(3, "acceptance-eckart-young", 0, 0);
    let mut worst_rel = 0.0f64;
    for inst in 0..20 {
        let (r, c) = (rng.gen_range(2..15), rng.gen_range(2..15));
        let k = rng.gen_range(1..r.min(c));
        let m = gaussian_matrix(r, c, &mut rng);
        let approx = optimal_rank_k(&m, k).map_err(|e| e.to_string())?;
        let residual = (&m - &approx.theta_diamond).frobenius_sq();
        let oracle = DMatrix::from_fn(r, c, |i, j| m[(i, j)]);
        let mut sv: Vec<f64> = oracle.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let tail: f64 = sv[k..].iter().map(|s| s * s).sum();
        let rel = (residual - tail).abs() / tail.max(f64::MIN_POSITIVE);
        worst_rel = worst_rel.max(rel);
        if !(rel < 1e-9) {
            return Err(format!("matrix {inst}: residual² {residual} vs tail {tail}"));
        }
        for t in 0..50 {
            let comp = gaussian_matrix(r, k, &mut rng).matmul(&gaussian_matrix(k, c, &mut rng));
            let theirs = (&m - &comp).frobenius_sq();
            if theirs < residual {
                return Err(format!("matrix {inst}: competitor {t} residual {theirs} beats {residual}"));
            }
        }
    }
    Ok(format!("20×50 competitors dominated, worst tail mismatch {worst_rel:.2e}"))
}

// ---- 4, 5, 6, 11: subspace recovery and value gaps ----

const NP_GRID: [usize; 5] = [64, 128, 256, 512, 1024];
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn recovery_config(n_pairs: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.data.n_pairs = n_pairs;
    cfg.data.test_fraction = 0.0;
    cfg.mdp.feature_scale = 3.0;
    cfg.train.epochs = 3000;
    cfg.train.learning_rate = 0.5;
    cfg.train.momentum = 0.9;
    cfg.plan.enabled = false;
    cfg
}

struct Recovery {
    cells: BTreeMap<(usize, u64), (ExperimentConfig, CellOutcome)>,
    tail_cells: Vec<(ExperimentConfig, CellOutcome)>,
}

fn run_recovery(np_grid: &[usize]) -> Result<BTreeMap<(usize, u64), (ExperimentConfig, CellOutcome)>, String> {
    let mut out = BTreeMap::new();
    for &np in np_grid {
        for &seed in &SEEDS {
            let cfg = recovery_config(np, seed);
            let cell = run_cell(&cfg, false).map_err(|e| format!("N_p {np} seed {seed}: {e}"))?;
            out.insert((np, seed), (cfg, cell));
        }
    }
    Ok(out)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs.iter().copied()), mean(ys.iter().copied()));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn criterion_4(rec: &Recovery) -> Verdict {
    let means: Vec<f64> = NP_GRID.iter().map(|&np| mean(SEEDS.iter().map(|&s| rec.cells[&(np, s)].1.row.dist_b))).collect();
    let xs: Vec<f64> = NP_GRID.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = means.iter().map(|d| d.ln()).collect();
    let slope = ols_slope(&xs, &ys);
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    let detail = format!("mean dist {:?}, slope {slope:.3}", means.iter().map(|d| (d * 1e4).round() / 1e4).collect::<Vec<_>>());
    check(monotone && (-0.75..=-0.25).contains(&slope), detail.clone(), format!("{detail} (monotone: {monotone})"))
}

fn tail_config(seed: u64, tail_energy: f64) -> ExperimentConfig {
    let mut cfg = recovery_config(4096, seed);
    cfg.spectrum.tail_energy = tail_energy;
    cfg
}

fn run_tail() -> Result<Vec<(ExperimentConfig, CellOutcome)>, String> {
    let mut out = Vec::new();
    let tail = 0.1 * ExperimentConfig::default().dims.n_users as f64;
    for energy in [0.0, tail] {
        for &seed in &SEEDS {
            let cfg = tail_config(seed, energy);
            let cell = run_cell(&cfg, false).map_err(|e| format!("tail {energy} seed {seed}: {e}"))?;
            out.push((cfg, cell));
        }
    }
    Ok(out)
}

fn criterion_5(rec: &Recovery) -> Verdict {
    let (clean, tailed) = rec.tail_cells.split_at(SEEDS.len());
    let d0 = mean(clean.iter().map(|(_, c)| c.row.dist_b));
    let d1 = mean(tailed.iter().map(|(_, c)| c.row.dist_b));
    let tail = tailed[0].1.row.tail;
    let detail = format!("N_p 4096: dist {d0:.4} (tail 0) vs {d1:.4} (tail {tail:.3}, tail/N {:.3}), margin {:.4}", tail / 16.0, d1 - d0);
    check(d1 > d0, detail.clone(), detail)
}

fn criterion_6(rec: &Recovery) -> Verdict {
    let mut worst = 0.0f64;
    let mut count = 0;
    let all = rec.cells.values().chain(rec.tail_cells.iter());
    for (cfg, cell) in all {
        count += 1;
        let r = cell.row.dk_ratio;
        if !(r <= std::f64::consts::SQRT_2) {
            let dump = std::env::temp_dir().join(format!("dk-violation-seed{}-np{}.json", cfg.seed, cfg.data.n_pairs));
            let _ = std::fs::write(&dump, cfg.to_json());
            return Err(format!("ratio {r} on seed {} N_p {}; instance dumped to {}", cfg.seed, cfg.data.n_pairs, dump.display()));
        }
        worst = worst.max(r);
    }
    Ok(format!("{count} models, max ratio {worst:.3}"))
}

fn capture_scale(cfg: &ExperimentConfig, truth: &GroundTruth<f64>, ckpt: &Checkpoint<f64>) -> Result<f64, String> {
    let mut unit = cfg.clone();
    unit.plan.zeta_scale = 1.0;
    let zeta1 = zeta_for(&unit, truth, cfg.data.n_pairs).map_err(|e| e.to_string())?;
    let worst = (0..truth.n_users()).map(|i| (&ckpt.delta_theta(i) - &truth.user_delta(i)).frobenius_sq()).fold(0.0, f64::max);
    Ok((worst / zeta1).sqrt())
}

fn criterion_11(rec: &Recovery) -> Verdict {
    let ends = [NP_GRID[0], NP_GRID[NP_GRID.len() - 1]];
    let mut scales = Vec::new();
    let mut runs = Vec::new();
    for &np in &ends {
        for &seed in &SEEDS {
            let (cfg, cell) = &rec.cells[&(np, seed)];
            let inst = build_instance(cfg).map_err(|e| e.to_string())?;
            scales.push(capture_scale(cfg, &inst.truth, &cell.checkpoint)?);
            runs.push((np, cfg.clone(), inst, cell.checkpoint.clone()));
        }
    }
    let mut sorted = scales.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let need = (0.9 * sorted.len() as f64).ceil() as usize;
    let scale = sorted[need - 1];
    let captured = scales.iter().filter(|&&s| s <= scale).count();
    let mut gaps: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (np, mut cfg, inst, ckpt) in runs {
        cfg.plan.zeta_scale = scale;
        cfg.plan.enabled = true;
        let zeta = zeta_for(&cfg, &inst.truth, cfg.data.n_pairs).map_err(|e| e.to_string())?;
        let plans = plan_checkpoint(&cfg, &inst, &ckpt, zeta).map_err(|e| e.to_string())?;
        gaps.entry(np).or_default().push(mean(plans.iter().map(|(r, _)| r.value_gap.unwrap())));
    }
    let (g_lo, g_hi) = (mean(gaps[&ends[0]].iter().copied()), mean(gaps[&ends[1]].iter().copied()));
    let detail = format!(
        "calibrated zeta_scale {scale:.4} ({captured}/{} runs captured); mean value gap {g_lo:.4} at N_p {} vs {g_hi:.4} at N_p {}",
        scales.len(),
        ends[0],
        ends[1]
    );
    check(g_hi < g_lo, detail.clone(), detail)
}

// ---- 7, 8: personalization and warm-up ----

fn personalization_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.data.n_pairs = 100;
    cfg.data.test_fraction = 0.2;
    cfg.mdp.feature_scale = 3.0;
    cfg.train.epochs = 10_000;
    cfg.train.learning_rate = 0.5;
    cfg.train.momentum = 0.9;
    cfg.train.lr_schedule = LrSchedule::LinearDecay;
    cfg.plan.enabled = false;
    cfg
}

fn criterion_7(si: &mut BTreeMap<u64, f64>) -> Verdict {
    let (mut share, mut local, mut global) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..10 {
        let mut cfg = personalization_config(seed);
        cfg.compare_baselines = true;
        let row = run_cell(&cfg, false).map_err(|e| e.to_string())?.row;
        si.insert(seed, row.ll_final);
        share.push(row.acc_share);
        local.push(row.acc_local);
        global.push(row.acc_global);
    }
    let (s, l, g) = (mean(share), mean(local), mean(global));
    let detail = format!("held-out accuracy share-left {s:.4}, local {l:.4}, global {g:.4}");
    check(s >= l + 0.01 && s >= g + 0.01, detail.clone(), detail)
}

fn criterion_8(si: &BTreeMap<u64, f64>) -> Verdict {
    let mut worst = f64::INFINITY;
    let mut failures = Vec::new();
    for (&seed, &ll_si) in si {
        for (variant, warmup) in [(Variant::G, 2 * 10_000 / 3), (Variant::Wu, 10_000 / 10)] {
            let mut cfg = personalization_config(seed);
            cfg.train.variant = variant;
            cfg.train.warmup_epochs = warmup;
            let ll = run_cell(&cfg, false).map_err(|e| e.to_string())?.row.ll_final;
            worst = worst.min(ll - ll_si);
            if ll < ll_si - 1e-3 {
                failures.push(format!("seed {seed} {variant:?}: {ll:.6} vs SI {ll_si:.6}"));
            }
        }
    }
    let mut cfg = personalization_config(0);
    cfg.train.epochs = 500;
    cfg.train.variant = Variant::G;
    cfg.train.warmup_epochs = 500;
    let warm = run_cell(&cfg, false).map_err(|e| e.to_string())?.row.ll_final;
    cfg.algo = Algo::Global;
    cfg.train.variant = Variant::Si;
    cfg.train.warmup_epochs = 0;
    let global = run_cell(&cfg, false).map_err(|e| e.to_string())?.row.ll_final;
    let diff = (warm - global).abs();
    if !(diff <= 1e-9) {
        failures.push(format!("T_w = T objective {warm} differs from lora_global {global}"));
    }
    let detail = format!("min (variant − SI) log-likelihood {worst:.2e} over {} seeds; T_w = T mismatch {diff:.1e}", si.len());
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

// ---- 9, 10: planner ----

fn deterministic_policies(mdp: &TabularMdp<f64>) -> Vec<MarkovPolicy<f64>> {
    let (s, a, h) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let total = a.pow((s * h) as u32);
    (0..total)
        .map(|mut code| {
            let actions: Vec<Vec<usize>> = (0..h)
                .map(|_| {
                    (0..s)
                        .map(|_| {
                            let x = code % a;
                            code /= a;
                            x
                        })
                        .collect()
                })
                .collect();
            MarkovPolicy::deterministic(mdp, &actions).unwrap()
        })
        .collect()
}

fn occupancy_features(mdp: &TabularMdp<f64>, occ: &OccupancyMeasure<f64>) -> Matrix<f64> {
    let (d1, d2) = mdp.feature_dims();
    let mut phi = Matrix::zeros(d1, d2);
    for h in 0..mdp.horizon() {
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                phi = &phi + &mdp.feature(h, s, a).scaled(occ.get(h, s, a));
            }
        }
    }
    phi
}

/// Expected linear reward by explicit trajectory enumeration.
fn policy_return(mdp: &TabularMdp<f64>, pi: &MarkovPolicy<f64>, theta: &Matrix<f64>) -> f64 {
    fn walk(mdp: &TabularMdp<f64>, pi: &MarkovPolicy<f64>, theta: &Matrix<f64>, h: usize, s: usize) -> f64 {
        if h == mdp.horizon() {
            return 0.0;
        }
        let mut v = 0.0;
        for (a, &p) in pi.action_probs(h, s).iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut next = 0.0;
            if h + 1 < mdp.horizon() {
                for (s2, &q) in mdp.transition(h, s, a).iter().enumerate() {
                    if q > 0.0 {
                        next += q * walk(mdp, pi, theta, h + 1, s2);
                    }
                }
            }
            v += p * (theta.inner(mdp.feature(h, s, a)) + next);
        }
        v
    }
    mdp.initial_dist().iter().enumerate().map(|(s, &p)| p * walk(mdp, pi, theta, 0, s)).sum()
}

/// Backward induction over deterministic actions.
fn dp_optimum(mdp: &TabularMdp<f64>, theta: &Matrix<f64>) -> f64 {
    let mut v = vec![0.0; mdp.n_states()];
    for h in (0..mdp.horizon()).rev() {
        v = (0..mdp.n_states())
            .map(|s| {
                (0..mdp.n_actions())
                    .map(|a| {
                        let cont: f64 = if h + 1 < mdp.horizon() { mdp.transition(h, s, a).iter().zip(&v).map(|(p, x)| p * x).sum() } else { 0.0 };
                        theta.inner(mdp.feature(h, s, a)) + cont
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
    }
    mdp.initial_dist().iter().zip(&v).map(|(p, x)| p * x).sum()
}

struct PlanInstance {
    mdp: TabularMdp<f64>,
    theta_init: Matrix<f64>,
    mu_ref: MarkovPolicy<f64>,
}

fn plan_instance(seed: u64, purpose: &str) -> PlanInstance {
    let mut rng = stream(seed, purpose, 0, 0);
    let mdp = make_random_mdp::<f64, _>(3, 2, 2, (3, 2), 1.0, &mut rng).unwrap();
    let theta_init = gaussian_matrix(3, 2, &mut rng).scaled(0.3);
    let mu_ref = MarkovPolicy::random(&mdp, &mut rng);
    PlanInstance { mdp, theta_init, mu_ref }
}

fn criterion_9() -> Verdict {
    let opts = FwOptions { iters: 500, gap_tol: 1e-3, step: StepRule::default() };
    let mut worst_gap = 0.0f64;
    let mut worst_dp = 0.0f64;
    let mut worst_iters = 0;
    for seed in 0..20u64 {
        let p = plan_instance(seed, "acceptance-fw");
        let mut rng = stream(seed, "acceptance-fw-center", 0, 0);
        let center = gaussian_matrix(3, 2, &mut rng);
        let zeta = 0.05 + rng.gen::<f64>();
        let theta_hat = &p.theta_init + &center;
        let cs = ConfidenceSet::new(0, center.clone(), zeta, p.theta_init.clone()).unwrap();
        let fw = frank_wolfe_plan(&p.mdp, &cs, &p.mu_ref, &opts).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.max(fw.gap);
        worst_iters = worst_iters.max(fw.iters);
        if !(fw.gap < 1e-3) {
            return Err(format!("instance {seed}: fw_gap {} after {} iterations", fw.gap, fw.iters));
        }
        let phi_ref = occupancy_features(&p.mdp, &occupancy(&p.mdp, &p.mu_ref).unwrap());
        let value = |occ: &OccupancyMeasure<f64>| {
            let d = &occupancy_features(&p.mdp, occ) - &phi_ref;
            theta_hat.inner(&d) - zeta.sqrt() * d.frobenius()
        };
        let occs: Vec<_> = deterministic_policies(&p.mdp).iter().map(|pi| occupancy(&p.mdp, pi).unwrap()).collect();
        let bound = fw.value + fw.gap;
        for (i, a) in occs.iter().enumerate() {
            if value(a) > bound + 1e-12 {
                return Err(format!("instance {seed}: deterministic policy {i} beats value + gap"));
            }
            for b in &occs[i + 1..] {
                for step in 1..100 {
                    let mix = a.mix(b, step as f64 / 100.0);
                    if value(&mix) > bound + 1e-12 {
                        return Err(format!("instance {seed}: mixture at {step}/100 beats value + gap"));
                    }
                }
            }
        }
        let greedy = ConfidenceSet::new(0, center, 0.0, p.theta_init.clone()).unwrap();
        let fw0 = frank_wolfe_plan(&p.mdp, &greedy, &p.mu_ref, &opts).map_err(|e| e.to_string())?;
        let dp = dp_optimum(&p.mdp, &theta_hat) - theta_hat.inner(&phi_ref);
        worst_dp = worst_dp.max((fw0.value - dp).abs());
        if !((fw0.value - dp).abs() <= 1e-12) {
            return Err(format!("instance {seed}: ζ = 0 value {} vs DP {dp}", fw0.value));
        }
    }
    Ok(format!("20 MDPs, max fw_gap {worst_gap:.1e} (≤ {worst_iters} iterations), ζ = 0 DP mismatch {worst_dp:.1e}"))
}

fn criterion_10() -> Verdict {
    let mut min_slack = f64::INFINITY;
    for seed in 0..20u64 {
        let p = plan_instance(seed, "acceptance-soundness");
        let mut rng = stream(seed, "acceptance-soundness-theta", 0, 0);
        let delta_star = gaussian_matrix(3, 2, &mut rng);
        let noise = gaussian_matrix(3, 2, &mut rng);
        let zeta = 0.02 + rng.gen::<f64>();
        // Even instances sit on the boundary of the ball.
        let radius = if seed % 2 == 0 { zeta.sqrt() } else { zeta.sqrt() * rng.gen::<f64>() };
        let center = &delta_star + &noise.scaled(radius / noise.frobenius());
        if (&center - &delta_star).frobenius_sq() > zeta * (1.0 + 1e-12) {
            return Err(format!("instance {seed}: construction left the ball"));
        }
        let theta_star = &p.theta_init + &delta_star;
        let cs = ConfidenceSet::new(0, center, zeta, p.theta_init.clone()).unwrap();
        let ref_value = policy_return(&p.mdp, &p.mu_ref, &theta_star);
        for (i, pi) in deterministic_policies(&p.mdp).iter().enumerate() {
            let pess = pessimistic_value(&p.mdp, pi, &cs, &p.mu_ref, &RewardHead::Linear).map_err(|e| e.to_string())?;
            let truth = policy_return(&p.mdp, pi, &theta_star) - ref_value;
            min_slack = min_slack.min(truth - pess);
            if pess > truth + 1e-12 {
                return Err(format!("instance {seed} policy {i}: pessimistic {pess} > true {truth}"));
            }
        }
    }
    Ok(format!("20 instances × 64 policies, min slack {min_slack:.2e}"))
}

// ---- 12: uniform concentration ----

fn criterion_12() -> Verdict {
    let mut ratios = Vec::new();
    for seed in 0..3u64 {
        let mut rng = stream(seed, "acceptance-concentration", 0, 0);
        let mdp = make_random_mdp::<f64, _>(3, 2, 2, (3, 2), 1.0, &mut rng).unwrap();
        let mu0 = MarkovPolicy::random(&mdp, &mut rng);
        let mu1 = MarkovPolicy::random(&mdp, &mut rng);
        let pairs: Vec<(Matrix<f64>, Matrix<f64>)> = (0..100_000)
            .map(|_| {
                let t0 = sample_trajectory(&mdp, &mu0, &mut rng);
                let t1 = sample_trajectory(&mdp, &mu1, &mut rng);
                (trajectory_features(&mdp, &t0).unwrap(), trajectory_features(&mdp, &t1).unwrap())
            })
            .collect();
        for _ in 0..3 {
            let ta = gaussian_matrix(3, 2, &mut rng);
            let tb = gaussian_matrix(3, 2, &mut rng);
            for n in [10_000, 100_000] {
                let c = concentration_check(&ta, &tb, &RewardHead::Linear, &mdp, &mu0, &mu1, &pairs[..n], 1 << 20).map_err(|e| e.to_string())?;
                let Some(r) = c.ratio else { return Err(format!("seed {seed}: degenerate pair")) };
                if !(0.9..=1.1).contains(&r) {
                    return Err(format!("seed {seed}, {n} pairs: ratio {r:.4}"));
                }
                ratios.push(r);
            }
        }
    }
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(format!("{} ratios in [{lo:.4}, {hi:.4}]", ratios.len()))
}

// ---- 13: determinism ----

fn criterion_13() -> Verdict {
    let mut base = recovery_config(48, 0);
    base.dims.n_users = 6;
    base.train.epochs = 200;
    base.plan.enabled = true;
    base.data.test_fraction = 0.25;
    let cfg = SweepConfig {
        base,
        grid: GridSpec { n_pairs: vec![24, 48], algo: vec![Algo::ShareLeft, Algo::Local], ..GridSpec::default() },
        seeds: vec![1, 2],
        threads: Some(2),
        record_wall_ms: false,
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    run_sweep(&cfg, &a).map_err(|e| e.to_string())?;
    run_sweep(&cfg, &b).map_err(|e| e.to_string())?;
    let (x, y) = (std::fs::read(&a).map_err(|e| e.to_string())?, std::fs::read(&b).map_err(|e| e.to_string())?);
    let rows = x.iter().filter(|&&c| c == b'\n').count() - 1;
    check(x == y, format!("{rows} rows, {} bytes identical", x.len()), "reruns differ".into())
}

// ---- driver ----

/// `spent` is time already used on shared work attributed to this criterion.
fn report(n: usize, budget: Duration, spent: Duration, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = f();
    let took = start.elapsed() + spent;
    let (ok, detail) = match verdict {
        Ok(d) if took <= budget => (true, d),
        Ok(d) => (false, format!("{d}; took {:.1}s, over the {}s budget", took.as_secs_f64(), budget.as_secs())),
        Err(d) => (false, d),
    };
    println!("criterion {n}: {} - {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64());
    ok
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let secs = Duration::from_secs;
    let mut all = true;
    all &= !on(1) || report(1, secs(10), Duration::ZERO, criterion_1);
    all &= !on(2) || report(2, secs(5), Duration::ZERO, criterion_2);
    all &= !on(3) || report(3, secs(5), Duration::ZERO, criterion_3);

    if on(4) || on(5) || on(6) || on(11) {
        let grid: &[usize] = if on(4) || on(6) { &NP_GRID } else { &[64, 1024] };
        let start = Instant::now();
        let cells = run_recovery(grid);
        let trained = start.elapsed();
        let mut rec = Recovery { cells: BTreeMap::new(), tail_cells: Vec::new() };
        let ready = match cells {
            Ok(c) => {
                rec.cells = c;
                true
            }
            Err(e) => {
                all &= report(4, secs(300), Duration::ZERO, || Err(e));
                false
            }
        };
        if ready && on(4) {
            all &= report(4, secs(300), trained, || criterion_4(&rec));
        }
        let mut tails_ready = false;
        if ready && (on(5) || on(6)) {
            all &= report(5, secs(300), Duration::ZERO, || {
                rec.tail_cells = run_tail()?;
                tails_ready = true;
                criterion_5(&rec)
            });
        }
        if on(6) {
            all &= report(6, secs(1), Duration::ZERO, || if ready && tails_ready { criterion_6(&rec) } else { Err("models unavailable".into()) });
        }
        if on(11) {
            all &= report(11, secs(300), trained.mul_f64(2.0 / grid.len() as f64), || {
                if ready {
                    criterion_11(&rec)
                } else {
                    Err("models unavailable".into())
                }
            });
        }
    }

    if on(7) || on(8) {
        let mut si = BTreeMap::new();
        all &= report(7, secs(180), Duration::ZERO, || criterion_7(&mut si));
        if on(8) {
            all &= report(8, secs(180), Duration::ZERO, || criterion_8(&si));
        }
    }
    all &= !on(9) || report(9, secs(60), Duration::ZERO, criterion_9);
    all &= !on(10) || report(10, secs(60), Duration::ZERO, criterion_10);
    all &= !on(12) || report(12, secs(60), Duration::ZERO, criterion_12);
    all &= !on(13) || report(13, secs(300), Duration::ZERO, criterion_13);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
