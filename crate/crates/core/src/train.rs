//! Projected gradient ascent on the preference log-likelihood.
//!
//! Each step moves along the batch gradient with every factor block divided by
//! the number of samples that feed it: common factors by the batch size, a
//! user's factors by that user's count in the batch.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PreferenceDataset, PreferenceSample};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::reward::{evaluate_groups, BaselineKind, BaselineModel, BaselineParams, RewardModel, ShareMode, SharedLoraModel};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;

/// Warm-up regime before per-user training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// No warm-up.
    #[default]
    Si,
    /// Global warm-up, then one third of the learning rate.
    G,
    /// Short global warm-up, schedule unchanged.
    Wu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η₀·(1 − t/T)`.
    LinearDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub variant: Variant,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Full batch whenever this is at least the dataset size.
    pub batch_size: usize,
    /// Stop once `‖g‖ < grad_tol · max(1, ‖params‖)`.
    pub grad_tol: f64,
    pub seed: u64,
    /// Heavy-ball coefficient; 0 disables momentum.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            warmup_epochs: 0,
            variant: Variant::Si,
            learning_rate: 0.5,
            lr_schedule: LrSchedule::Constant,
            batch_size: usize::MAX >> 1,
            grad_tol: 1e-6,
            seed: 0,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::validation("warmup_epochs", format!("{} exceeds epochs = {}", self.warmup_epochs, self.epochs)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::validation("learning_rate", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::validation("grad_tol", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Warm-up length actually used: zero for SI.
    pub fn effective_warmup(&self) -> usize {
        match self.variant {
            Variant::Si => 0,
            Variant::G | Variant::Wu => self.warmup_epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Pooled log-likelihood after each epoch.
    pub log_likelihood: Vec<f64>,
    /// Norm of the normalized full gradient at the returned parameters.
    pub final_grad_norm: f64,
    pub wall_ms: f64,
    pub epochs_run: usize,
    /// Number of warm-up epochs that ran before per-user training.
    pub warmup_boundary: usize,
}

impl TrainReport {
    fn empty() -> Self {
        Self { log_likelihood: Vec::new(), final_grad_norm: f64::NAN, wall_ms: 0.0, epochs_run: 0, warmup_boundary: 0 }
    }

    pub fn final_log_likelihood(&self) -> Option<f64> {
        self.log_likelihood.last().copied()
    }
}

/// Block-normalized gradient of the objective over `groups`.
fn normalized_step<T: Scalar, M: RewardModel<T>, S>(model: &M, groups: &[Vec<S>]) -> (T, Vec<T>)
where
    S: std::borrow::Borrow<PreferenceSample<T>> + Sync,
{
    let (ll, theta_grads) = evaluate_groups(model, groups, true);
    let total: usize = groups.iter().map(Vec::len).sum();
    let fg = model.chain_gradient(&theta_grads);
    let mut flat = Vec::with_capacity(model.num_params());
    let shared_div = T::of(total.max(1) as f64);
    for m in &fg.shared {
        flat.extend(m.as_slice().iter().map(|&x| x / shared_div));
    }
    for (user, blocks) in fg.users.iter().enumerate() {
        let div = T::of(groups[user].len().max(1) as f64);
        for m in blocks {
            flat.extend(m.as_slice().iter().map(|&x| x / div));
        }
    }
    (ll, flat)
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

struct Phase<'a, T> {
    ds: &'a PreferenceDataset<T>,
    cfg: &'a TrainConfig,
    epochs: usize,
    epoch_offset: usize,
    lr: &'a dyn Fn(usize) -> f64,
}

/// Runs one optimization phase in place. Returns the final normalized
/// gradient norm.
fn run_phase<T: Scalar, M: RewardModel<T>>(
    model: &mut M,
    phase: Phase<'_, T>,
    shuffle: &mut Stream,
    log: &mut Vec<f64>,
) -> Result<f64> {
    let ds = phase.ds;
    let cfg = phase.cfg;
    let (mut ll, mut grad) = normalized_step(model, ds.per_user());
    check_finite(ll, &grad, phase.epoch_offset)?;
    let full_batch = cfg.batch_size >= ds.len();
    let mut velocity = vec![T::zero(); grad.len()];
    let momentum = T::of(cfg.momentum);
    let pooled: Vec<&PreferenceSample<T>> = ds.iter().collect();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    for local_epoch in 0..phase.epochs {
        let epoch = phase.epoch_offset + local_epoch;
        let params_norm = norm(&model.params());
        if norm(&grad) < T::of(cfg.grad_tol) * params_norm.max(T::one()) {
            break;
        }
        let eta = T::of((phase.lr)(local_epoch));
        if full_batch {
            apply_step(model, &grad, &mut velocity, eta, momentum)?;
        } else {
            order.shuffle(shuffle);
            for chunk in order.chunks(cfg.batch_size) {
                let mut groups: Vec<Vec<&PreferenceSample<T>>> = vec![Vec::new(); ds.n_users()];
                for &idx in chunk {
                    groups[pooled[idx].user()].push(pooled[idx]);
                }
                let (_, g) = normalized_step(model, &groups);
                check_finite(T::zero(), &g, epoch)?;
                apply_step(model, &g, &mut velocity, eta, momentum)?;
            }
        }
        (ll, grad) = normalized_step(model, ds.per_user());
        check_finite(ll, &grad, epoch)?;
        log.push(ll.as_f64());
    }
    Ok(norm(&grad).as_f64())
}

fn check_finite<T: Scalar>(ll: T, grad: &[T], epoch: usize) -> Result<()> {
    if !ll.is_finite() {
        return Err(Error::NumericalFailure { epoch, detail: format!("objective is {ll}") });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure { epoch, detail: format!("gradient coordinate {i} is not finite") });
    }
    Ok(())
}

fn apply_step<T: Scalar, M: RewardModel<T>>(model: &mut M, grad: &[T], velocity: &mut [T], eta: T, momentum: T) -> Result<()> {
    let mut p = model.params();
    for ((x, v), &g) in p.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *x += eta * *v;
    }
    model.set_params(&p)?;
    model.project();
    Ok(())
}

fn schedule(eta0: f64, schedule: LrSchedule, span: usize, offset: usize) -> impl Fn(usize) -> f64 {
    move |t| match schedule {
        LrSchedule::Constant => eta0,
        LrSchedule::LinearDecay => eta0 * (1.0 - (t + offset) as f64 / span.max(1) as f64),
    }
}

/// Trains a shared-factor model: an optional global warm-up on the pooled
/// data, then joint training of the shared and per-user factors.
pub fn train_share_lora<T: Scalar>(
    ds: &PreferenceDataset<T>,
    init: &SharedLoraModel<T>,
    cfg: &TrainConfig,
) -> Result<(SharedLoraModel<T>, TrainReport)> {
    cfg.validate()?;
    check_fit(ds, init.dims(), init.n_users())?;
    let start = Instant::now();
    let mut model = init.clone();
    let mut report = TrainReport::empty();
    if cfg.epochs == 0 {
        report.final_grad_norm = norm(&normalized_step(&model, ds.per_user()).1).as_f64();
        return Ok((model, report));
    }
    let mut shuffle = stream(cfg.seed, "shuffle", 0, 0);
    let warmup = cfg.effective_warmup();
    let t = cfg.epochs;
    let mut grad_norm = f64::NAN;
    if warmup > 0 {
        let (b, w) = match model.share_mode {
            ShareMode::ShareLeft => (model.shared_factor.clone(), model.user_factors[0].clone()),
            ShareMode::ShareRight => (model.user_factors[0].clone(), model.shared_factor.clone()),
        };
        let mut global =
            BaselineModel::new(model.theta_init.clone(), model.n_users(), model.frob_bound, model.head, BaselineParams::Global { b, w })?;
        let lr = schedule(cfg.learning_rate, cfg.lr_schedule, t, 0);
        let phase = Phase { ds, cfg, epochs: warmup, epoch_offset: 0, lr: &lr };
        grad_norm = run_phase(&mut global, phase, &mut shuffle, &mut report.log_likelihood)?;
        report.warmup_boundary = report.log_likelihood.len();
        let BaselineParams::Global { b, w } = global.params else { unreachable!("warm-up model is global") };
        let (shared, user) = match model.share_mode {
            ShareMode::ShareLeft => (b, w),
            ShareMode::ShareRight => (w, b),
        };
        model.shared_factor = shared;
        model.user_factors.iter_mut().for_each(|u| *u = user.clone());
    }
    if t > warmup {
        let lr: Box<dyn Fn(usize) -> f64> = match cfg.variant {
            Variant::G => Box::new(schedule(cfg.learning_rate / 3.0, cfg.lr_schedule, t - warmup, 0)),
            Variant::Si | Variant::Wu => Box::new(schedule(cfg.learning_rate, cfg.lr_schedule, t, warmup)),
        };
        let phase = Phase { ds, cfg, epochs: t - warmup, epoch_offset: report.log_likelihood.len(), lr: &*lr };
        grad_norm = run_phase(&mut model, phase, &mut shuffle, &mut report.log_likelihood)?;
    }
    report.final_grad_norm = grad_norm;
    report.epochs_run = report.log_likelihood.len();
    report.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((model, report))
}

/// Trains a baseline. Local adapters are fitted independently on each user's
/// data, user `i` shuffling with stream `(seed, "shuffle", 0, i)`.
pub fn train_baseline<T: Scalar>(
    ds: &PreferenceDataset<T>,
    init: &BaselineModel<T>,
    cfg: &TrainConfig,
) -> Result<(BaselineModel<T>, TrainReport)> {
    cfg.validate()?;
    check_fit(ds, init.dims(), init.n_users())?;
    let start = Instant::now();
    let lr = schedule(cfg.learning_rate, cfg.lr_schedule, cfg.epochs, 0);
    let mut report = TrainReport::empty();
    let mut model = init.clone();
    match &init.params {
        BaselineParams::Global { .. } | BaselineParams::Full { .. } => {
            let mut shuffle = stream(cfg.seed, "shuffle", 0, 0);
            let phase = Phase { ds, cfg, epochs: cfg.epochs, epoch_offset: 0, lr: &lr };
            report.final_grad_norm = run_phase(&mut model, phase, &mut shuffle, &mut report.log_likelihood)?;
        }
        BaselineParams::Local { pairs } => {
            let runs = pairs
                .par_iter()
                .enumerate()
                .map(|(i, (b, w))| -> Result<(Matrix<T>, Matrix<T>, Vec<f64>, f64)> {
                    let single = ds.single_user(i)?;
                    let mut m = BaselineModel::new(
                        init.theta_init.clone(),
                        1,
                        init.frob_bound,
                        init.head,
                        BaselineParams::Global { b: b.clone(), w: w.clone() },
                    )?;
                    let mut shuffle = stream(cfg.seed, "shuffle", 0, i as u64);
                    let mut log = Vec::new();
                    let phase = Phase { ds: &single, cfg, epochs: cfg.epochs, epoch_offset: 0, lr: &lr };
                    let g = run_phase(&mut m, phase, &mut shuffle, &mut log)?;
                    let BaselineParams::Global { b, w } = m.params else { unreachable!("single-user model is global") };
                    Ok((b, w, log, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let epochs = runs.iter().map(|r| r.2.len()).max().unwrap_or(0);
            let mut initial = Vec::with_capacity(runs.len());
            for i in 0..runs.len() {
                let single = ds.single_user(i)?;
                let m = BaselineModel::new(
                    init.theta_init.clone(),
                    1,
                    init.frob_bound,
                    init.head,
                    BaselineParams::Global { b: pairs[i].0.clone(), w: pairs[i].1.clone() },
                )?;
                initial.push(evaluate_groups(&m, single.per_user(), false).0.as_f64());
            }
            report.log_likelihood = (0..epochs)
                .map(|e| {
                    runs.iter().zip(&initial).map(|(r, &ll0)| r.2.get(e).or(r.2.last()).copied().unwrap_or(ll0)).sum()
                })
                .collect();
            report.final_grad_norm = runs.iter().map(|r| r.3 * r.3).sum::<f64>().sqrt();
            model.params = BaselineParams::Local { pairs: runs.into_iter().map(|(b, w, _, _)| (b, w)).collect() };
        }
    }
    report.epochs_run = report.log_likelihood.len();
    report.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((model, report))
}

fn check_fit<T: Scalar>(ds: &PreferenceDataset<T>, dims: (usize, usize), n_users: usize) -> Result<()> {
    if ds.dims() != dims || ds.n_users() != n_users {
        return Err(Error::dims(format!(
            "dataset is {:?} with {} users, model is {dims:?} with {n_users}",
            ds.dims(),
            ds.n_users()
        )));
    }
    Ok(())
}

/// Largest step `η ≤ eta0` (found by halving) for which one full-batch
/// projected step from `model` satisfies the sufficient-increase condition
/// `F(p⁺) ≥ F(p) + ½·η·‖g‖²` in normalized units.
pub fn safe_learning_rate<T: Scalar, M: RewardModel<T>>(model: &M, ds: &PreferenceDataset<T>, eta0: f64) -> Result<f64> {
    check_fit(ds, model.dims(), model.n_users())?;
    let (ll, grad) = normalized_step(model, ds.per_user());
    let g2 = grad.iter().map(|&x| x * x).sum::<T>();
    let denom = T::of(ds.len().max(1) as f64);
    let mut eta = eta0;
    for _ in 0..60 {
        let mut trial = model.clone();
        let mut v = vec![T::zero(); grad.len()];
        apply_step(&mut trial, &grad, &mut v, T::of(eta), T::zero())?;
        let ll_new = evaluate_groups(&trial, ds.per_user(), false).0;
        if (ll_new - ll) / denom >= T::of(0.5 * eta) * g2 / T::of(ds.n_users() as f64) {
            return Ok(eta);
        }
        eta *= 0.5;
    }
    Ok(eta)
}

/// Axis-aligned grid over every scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points_per_axis: usize,
}

impl GridSpec {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points_per_axis.max(2) - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOptimum<T> {
    pub params: Vec<T>,
    pub log_likelihood: T,
}

pub const MAX_GRID_PARAMS: usize = 4;
pub const MAX_GRID_POINTS: u128 = 1_000_000;

/// Exhaustive grid maximizer of the log-likelihood over the parameters of
/// `template`, skipping points outside the Frobenius constraint.
pub fn mle_bruteforce<T: Scalar, M: RewardModel<T>>(ds: &PreferenceDataset<T>, template: &M, grid: GridSpec) -> Result<GridOptimum<T>> {
    check_fit(ds, template.dims(), template.n_users())?;
    let n = template.num_params();
    if n > MAX_GRID_PARAMS {
        return Err(Error::TooLarge { what: "grid parameter count", size: n as u128, cap: MAX_GRID_PARAMS as u128 });
    }
    if grid.points_per_axis < 2 || !(grid.hi > grid.lo) {
        return Err(Error::invalid("grid needs hi > lo and at least two points per axis"));
    }
    let total = (grid.points_per_axis as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if total > MAX_GRID_POINTS {
        return Err(Error::TooLarge { what: "grid", size: total, cap: MAX_GRID_POINTS });
    }
    let axis: Vec<T> = (0..grid.points_per_axis).map(|i| T::of(grid.lo + grid.step() * i as f64)).collect();
    let mut digits = vec![0usize; n];
    let mut model = template.clone();
    let mut best: Option<GridOptimum<T>> = None;
    for _ in 0..total {
        let p: Vec<T> = digits.iter().map(|&d| axis[d]).collect();
        model.set_params(&p)?;
        if model.is_feasible() {
            let ll = evaluate_groups(&model, ds.per_user(), false).0;
            if best.as_ref().map_or(true, |b| ll > b.log_likelihood) {
                best = Some(GridOptimum { params: p, log_likelihood: ll });
            }
        }
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < grid.points_per_axis {
                break;
            }
            *d = 0;
        }
    }
    best.ok_or_else(|| Error::invalid("no grid point satisfies the Frobenius constraint"))
}

/// Starting model for a baseline kind, matching [`SharedLoraModel::init`]
/// conventions.
pub fn baseline_init<T: Scalar>(kind: BaselineKind, like: &SharedLoraModel<T>, seed: u64) -> Result<BaselineModel<T>> {
    BaselineModel::init(kind, like.theta_init.clone(), like.rank(), like.n_users(), like.frob_bound, like.head, seed)
}
