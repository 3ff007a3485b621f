use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, load_dataset, save_dataset, synthesize_ground_truth, PreferenceDataset, ThetaInitMode};
use crate::error::Result;
use crate::linalg::{optimal_rank_k, orthonormalize, principal_angle_dist, principal_angle_dist_via_complement, singular_values, Matrix};
use crate::mdp::{enumerate_policies, make_random_mdp, occupancy, MarkovPolicy, DEFAULT_POLICY_CAP};
use crate::planner::{frank_wolfe_plan, pessimistic_value, ConfidenceSet, FwOptions};
use crate::reward::{
    grad_log_likelihood, log_likelihood, BaselineKind, BaselineModel, Checkpoint, RewardHead, RewardModel, ShareMode, SharedLoraModel,
};
use crate::rng::{gaussian, stream, Stream};

/// Analytic gradient under test, flattened in factor order.
pub type GradientFn = fn(&Checkpoint<f64>, &PreferenceDataset<f64>) -> Result<Vec<f64>>;

fn analytic_gradient(ckpt: &Checkpoint<f64>, ds: &PreferenceDataset<f64>) -> Result<Vec<f64>> {
    Ok(match ckpt {
        Checkpoint::Shared(m) => grad_log_likelihood(m, ds)?.flatten(),
        Checkpoint::Baseline(m) => grad_log_likelihood(m, ds)?.flatten(),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub gradient: GradientFn,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { gradient: analytic_gradient, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

fn outcome(name: impl Into<String>, result: Result<std::result::Result<String, String>>) -> CheckOutcome {
    let name = name.into();
    match result {
        Ok(Ok(detail)) => CheckOutcome { name, passed: true, detail },
        Ok(Err(detail)) => CheckOutcome { name, passed: false, detail },
        Err(e) => CheckOutcome { name, passed: false, detail: format!("error: {e}") },
    }
}

/// Runs the invariant suite. Failures are reported, never raised.
pub fn run_checks(opts: &CheckOptions) -> CheckReport {
    let mut checks = gradient_checks(opts);
    checks.push(outcome("angle_formulas", angle_formulas(opts.seed)));
    checks.push(outcome("eckart_young", eckart_young(opts.seed)));
    checks.push(outcome("occupancy_conservation", occupancy_conservation(opts.seed)));
    checks.push(outcome("fw_certificate", fw_certificate(opts.seed)));
    checks.push(outcome("dataset_round_trip", dataset_round_trip(opts.seed)));
    checks.push(outcome("checkpoint_round_trip", checkpoint_round_trip(opts.seed)));
    CheckReport { passed: checks.iter().all(|c| c.passed), checks }
}

fn tiny_dataset(seed: u64, head: &RewardHead<f64>) -> Result<PreferenceDataset<f64>> {
    let mdp = make_random_mdp(3, 2, 2, (4, 3), 1.5, &mut stream(seed, "check-mdp", 0, 0))?;
    let truth = synthesize_ground_truth(4, 3, 3, 2, &[3.0, 2.0], ThetaInitMode::Zero, 10.0, &mut stream(seed, "check-truth", 0, 0))?;
    let mu = MarkovPolicy::uniform(&mdp);
    generate_dataset(&mdp, &truth, 6, &mu, &mu, head, seed)
}

fn randomized<M: RewardModel<f64>>(mut m: M, rng: &mut Stream) -> Result<M> {
    let p: Vec<f64> = (0..m.num_params()).map(|_| 0.5 * gaussian::<f64, _>(rng)).collect();
    m.set_params(&p)?;
    Ok(m)
}

fn finite_difference<M: RewardModel<f64>>(m: &M, ds: &PreferenceDataset<f64>, h: f64) -> Result<Vec<f64>> {
    let base = m.params();
    let mut probe = m.clone();
    let mut out = Vec::with_capacity(base.len());
    for j in 0..base.len() {
        let mut p = base.clone();
        p[j] = base[j] + h;
        probe.set_params(&p)?;
        let up = log_likelihood(&probe, ds)?;
        p[j] = base[j] - h;
        probe.set_params(&p)?;
        let down = log_likelihood(&probe, ds)?;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `max|a − n| / max(1, max|n|)` and the worst coordinate.
fn compare(analytic: &[f64], numeric: &[f64]) -> std::result::Result<(f64, usize), String> {
    if analytic.len() != numeric.len() {
        return Err(format!("analytic gradient has {} coordinates, expected {}", analytic.len(), numeric.len()));
    }
    let scale = numeric.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let (worst, at) = analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(j, (a, n))| ((a - n).abs(), j))
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 || cur.0.is_nan() { cur } else { best });
    Ok((worst / scale, at))
}

fn gradient_checks(opts: &CheckOptions) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for (head_name, head) in [("linear", RewardHead::Linear), ("tanh", RewardHead::Tanh { range: 2.0 })] {
        let ds = match tiny_dataset(opts.seed, &head) {
            Ok(ds) => ds,
            Err(e) => {
                out.push(outcome(format!("gradient/{head_name}"), Err(e)));
                continue;
            }
        };
        let mut rng = stream(opts.seed, "check-params", 0, 0);
        let theta_init = Matrix::from_fn(4, 3, |_, _| 0.3 * gaussian::<f64, _>(&mut rng));
        let models: Vec<(&str, Result<Checkpoint<f64>>)> = vec![
            ("share_left", shared(&theta_init, ShareMode::ShareLeft, head, &mut rng)),
            ("share_right", shared(&theta_init, ShareMode::ShareRight, head, &mut rng)),
            ("lora_global", baseline(&theta_init, BaselineKind::LoraGlobal, head, &mut rng)),
            ("lora_local", baseline(&theta_init, BaselineKind::LoraLocal, head, &mut rng)),
            ("full_param", baseline(&theta_init, BaselineKind::FullParam, head, &mut rng)),
        ];
        for (name, model) in models {
            let result = model.and_then(|ckpt| {
                let numeric = match &ckpt {
                    Checkpoint::Shared(m) => finite_difference(m, &ds, 1e-5)?,
                    Checkpoint::Baseline(m) => finite_difference(m, &ds, 1e-5)?,
                };
                let analytic = (opts.gradient)(&ckpt, &ds)?;
                Ok(compare(&analytic, &numeric).and_then(|(rel, j)| {
                    let line = format!("relative error {rel:.3e} at coordinate {j}: analytic {:.9e}, numeric {:.9e}", analytic[j], numeric[j]);
                    if rel < 1e-6 {
                        Ok(line)
                    } else {
                        Err(line)
                    }
                }))
            });
            out.push(outcome(format!("gradient/{name}/{head_name}"), result));
        }
    }
    out
}

fn shared(theta_init: &Matrix<f64>, mode: ShareMode, head: RewardHead<f64>, rng: &mut Stream) -> Result<Checkpoint<f64>> {
    let m = SharedLoraModel::init(theta_init.clone(), mode, 2, 3, 10.0, head, 1)?;
    Ok(Checkpoint::Shared(randomized(m, rng)?))
}

fn baseline(theta_init: &Matrix<f64>, kind: BaselineKind, head: RewardHead<f64>, rng: &mut Stream) -> Result<Checkpoint<f64>> {
    let m = BaselineModel::init(kind, theta_init.clone(), 2, 3, 10.0, head, 1)?;
    Ok(Checkpoint::Baseline(randomized(m, rng)?))
}

fn angle_formulas(seed: u64) -> Result<std::result::Result<String, String>> {
    let mut rng = stream(seed, "check-angles", 0, 0);
    let mut worst = 0.0f64;
    for t in 0..50 {
        let d = 3 + t % 20;
        let k = 1 + t % d.min(5);
        let b1 = orthonormalize(&Matrix::from_fn(d, k, |_, _| gaussian::<f64, _>(&mut rng)));
        let b2 = orthonormalize(&Matrix::from_fn(d, k, |_, _| gaussian::<f64, _>(&mut rng)));
        worst = worst.max((principal_angle_dist(&b1, &b2)? - principal_angle_dist_via_complement(&b1, &b2)?).abs());
    }
    let line = format!("max disagreement {worst:.3e} over 50 pairs");
    Ok(if worst < 1e-9 { Ok(line) } else { Err(line) })
}

fn eckart_young(seed: u64) -> Result<std::result::Result<String, String>> {
    let mut rng = stream(seed, "check-eckart-young", 0, 0);
    for t in 0..10 {
        let (r, c, k) = (4 + t % 5, 3 + t % 4, 1 + t % 3);
        let m = Matrix::from_fn(r, c, |_, _| gaussian::<f64, _>(&mut rng));
        let approx = optimal_rank_k(&m, k)?;
        let residual = (&m - &approx.theta_diamond).frobenius_sq();
        let sv = singular_values(&m)?;
        let tail: f64 = sv[k..].iter().map(|s| s * s).sum();
        if (residual - tail).abs() > 1e-9 * tail.max(1e-300) && (residual - tail).abs() > 1e-12 {
            return Ok(Err(format!("matrix {t}: residual² {residual:.12e} differs from spectrum tail {tail:.12e}")));
        }
        for _ in 0..20 {
            let b = Matrix::from_fn(r, k, |_, _| gaussian::<f64, _>(&mut rng));
            let w = Matrix::from_fn(k, c, |_, _| gaussian::<f64, _>(&mut rng));
            if (&m - &b.matmul(&w)).frobenius_sq() < residual - 1e-12 {
                return Ok(Err(format!("matrix {t}: a random rank-{k} competitor beats the truncated SVD")));
            }
        }
    }
    Ok(Ok("10 matrices, 20 competitors each".into()))
}

fn occupancy_conservation(seed: u64) -> Result<std::result::Result<String, String>> {
    let mut worst = 0.0f64;
    for t in 0..10 {
        let mut rng = stream(seed, "check-occupancy", t, 0);
        let mdp = make_random_mdp(2 + t as usize % 4, 2 + t as usize % 3, 1 + t as usize % 3, (2, 2), 1.0, &mut rng)?;
        let occ = occupancy(&mdp, &MarkovPolicy::random(&mdp, &mut rng))?;
        worst = worst.max(occ.conservation_defect(&mdp));
        for h in 0..mdp.horizon() {
            worst = worst.max((occ.step_mass(h) - 1.0).abs());
        }
    }
    let line = format!("max defect {worst:.3e} over 10 random policies");
    Ok(if worst < 1e-12 { Ok(line) } else { Err(line) })
}

fn fw_certificate(seed: u64) -> Result<std::result::Result<String, String>> {
    let mut worst_gap = 0.0f64;
    for t in 0..5 {
        let mut rng = stream(seed, "check-fw", t, 0);
        let mdp = make_random_mdp(3, 2, 2, (3, 2), 1.0, &mut rng)?;
        let center = Matrix::from_fn(3, 2, |_, _| gaussian::<f64, _>(&mut rng));
        let cs = ConfidenceSet::new(0, center, 0.5, Matrix::zeros(3, 2))?;
        let mu_ref = MarkovPolicy::uniform(&mdp);
        let fw = frank_wolfe_plan(&mdp, &cs, &mu_ref, &FwOptions::default())?;
        worst_gap = worst_gap.max(fw.gap);
        for pi in enumerate_policies(&mdp, DEFAULT_POLICY_CAP)? {
            let v = pessimistic_value(&mdp, &pi, &cs, &mu_ref, &RewardHead::Linear)?;
            if v > fw.value + fw.gap + 1e-12 {
                return Ok(Err(format!("instance {t}: policy value {v:.12e} exceeds certificate {:.12e}", fw.value + fw.gap)));
            }
        }
    }
    let line = format!("5 instances, largest gap {worst_gap:.3e}");
    Ok(if worst_gap < 1e-3 { Ok(line) } else { Err(line) })
}

fn scratch_path(tag: &str) -> std::path::PathBuf {
    std::env::temp_dir().join(format!("sharelora-check-{}-{tag}.json", std::process::id()))
}

fn dataset_round_trip(seed: u64) -> Result<std::result::Result<String, String>> {
    let ds = tiny_dataset(seed, &RewardHead::Linear)?;
    let path = scratch_path("dataset");
    save_dataset(&ds, &path)?;
    let back = load_dataset::<f64>(&path);
    let _ = std::fs::remove_file(&path);
    Ok(if back? == ds { Ok(format!("{} samples", ds.len())) } else { Err("loaded dataset differs".into()) })
}

fn checkpoint_round_trip(seed: u64) -> Result<std::result::Result<String, String>> {
    let mut rng = stream(seed, "check-checkpoint", 0, 0);
    let theta_init = Matrix::from_fn(4, 3, |_, _| gaussian::<f64, _>(&mut rng));
    let ckpts = [
        shared(&theta_init, ShareMode::ShareLeft, RewardHead::Linear, &mut rng)?,
        shared(&theta_init, ShareMode::ShareRight, RewardHead::Tanh { range: 3.0 }, &mut rng)?,
        baseline(&theta_init, BaselineKind::LoraLocal, RewardHead::Linear, &mut rng)?,
        baseline(&theta_init, BaselineKind::FullParam, RewardHead::Linear, &mut rng)?,
    ];
    for (i, c) in ckpts.iter().enumerate() {
        if &Checkpoint::<f64>::from_json(&c.to_json())? != c {
            return Ok(Err(format!("checkpoint {i} changed after a round trip")));
        }
    }
    Ok(Ok(format!("{} checkpoints", ckpts.len())))
}
