//! Experiment configuration, seeded end-to-end runs, sweeps, and the
//! self-check suite behind the command-line tool.

mod check;
mod sweep;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, synthesize_ground_truth, GroundTruth, PreferenceDataset, ThetaInitMode};
use crate::diagnostics::{davis_kahan_ratio, pref_accuracy, subspace_error, Accuracy};
use crate::error::{parse_error, Error, Result};
use crate::linalg::Matrix;
use crate::mdp::{make_random_mdp, MarkovPolicy, TabularMdp};
use crate::planner::{compute_zeta, plan_users, FwOptions, PlanReport, StepRule, ZetaInputs};
use crate::reward::{log_likelihood, BaselineKind, BaselineModel, Checkpoint, HeadSpec, RewardHead, ShareMode, SharedLoraModel};
use crate::rng::stream;
use crate::train::{train_baseline, train_share_lora, TrainConfig, TrainReport};

pub use check::{run_checks, CheckOptions, CheckOutcome, CheckReport, GradientFn};
pub use sweep::{read_sweep_csv, run_sweep, sweep_cells, GridSpec, SweepConfig, SweepRow, SWEEP_HEADER};

/// Which reward model a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    #[default]
    ShareLeft,
    ShareRight,
    Local,
    Global,
    Full,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::ShareLeft => "share-left",
            Algo::ShareRight => "share-right",
            Algo::Local => "local",
            Algo::Global => "global",
            Algo::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::validation("algo", format!("unknown algorithm `{s}`")))
    }

    fn share_mode(self) -> Option<ShareMode> {
        match self {
            Algo::ShareLeft => Some(ShareMode::ShareLeft),
            Algo::ShareRight => Some(ShareMode::ShareRight),
            _ => None,
        }
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            Algo::Local => Some(BaselineKind::LoraLocal),
            Algo::Global => Some(BaselineKind::LoraGlobal),
            Algo::Full => Some(BaselineKind::FullParam),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimsSpec {
    pub d1: usize,
    pub d2: usize,
    pub n_users: usize,
    pub k_true: usize,
    pub k_model: usize,
}

impl Default for DimsSpec {
    fn default() -> Self {
        Self { d1: 20, d2: 4, n_users: 16, k_true: 2, k_model: 2 }
    }
}

/// Planted singular values: `leading` (one per true rank), then
/// `tail_energy` spread evenly over `tail_rank` further values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSpec {
    pub leading: Vec<f64>,
    pub tail_energy: f64,
    /// Defaults to every remaining direction.
    pub tail_rank: Option<usize>,
}

impl Default for SpectrumSpec {
    fn default() -> Self {
        Self { leading: vec![12.0, 8.0], tail_energy: 0.0, tail_rank: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub feature_scale: f64,
}

impl Default for MdpSpec {
    fn default() -> Self {
        Self { n_states: 10, n_actions: 4, horizon: 3, feature_scale: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RefPolicy {
    #[default]
    Uniform,
    /// Drawn once per seed, independently for each slot.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Pairs per user before the held-out split.
    pub n_pairs: usize,
    pub mu0: RefPolicy,
    pub mu1: RefPolicy,
    pub test_fraction: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { n_pairs: 256, mu0: RefPolicy::Uniform, mu1: RefPolicy::Uniform, test_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSpec {
    pub enabled: bool,
    pub zeta_scale: f64,
    pub delta: f64,
    pub fw_iters: usize,
    pub gap_tol: f64,
    pub step: StepRule,
    /// Defaults to 0 without tail energy and to `tail / N` otherwise.
    pub min_residual: Option<f64>,
}

impl Default for PlanSpec {
    fn default() -> Self {
        Self { enabled: true, zeta_scale: 1.0, delta: 0.1, fw_iters: 500, gap_tol: 1e-3, step: StepRule::default(), min_residual: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dims: DimsSpec,
    pub spectrum: SpectrumSpec,
    pub mdp: MdpSpec,
    pub data: DataSpec,
    /// `train.seed` is replaced by `seed` when a run starts.
    pub train: TrainConfig,
    pub plan: PlanSpec,
    pub head: HeadSpec,
    pub theta_init: ThetaInitMode,
    pub frob_bound: f64,
    pub algo: Algo,
    /// Also train share-left, local, and global models for the accuracy columns.
    pub compare_baselines: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dims: DimsSpec::default(),
            spectrum: SpectrumSpec::default(),
            mdp: MdpSpec::default(),
            data: DataSpec::default(),
            train: TrainConfig::default(),
            plan: PlanSpec::default(),
            head: HeadSpec::Linear,
            theta_init: ThetaInitMode::Zero,
            frob_bound: 10.0,
            algo: Algo::ShareLeft,
            compare_baselines: false,
            seed: 0,
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::validation(field, "must be at least 1"));
    }
    Ok(())
}

fn finite_non_negative(field: &str, v: f64) -> Result<()> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::validation(field, format!("must be finite and non-negative, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(text)).map_err(parse_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        positive("dims.d1", d.d1)?;
        positive("dims.d2", d.d2)?;
        positive("dims.n_users", d.n_users)?;
        positive("dims.k_true", d.k_true)?;
        positive("dims.k_model", d.k_model)?;
        let max_rank = d.d1.min(d.d2 * d.n_users);
        if d.k_model > max_rank {
            return Err(Error::validation("dims.k_model", format!("{} exceeds min(d1, d2·n_users) = {max_rank}", d.k_model)));
        }
        if d.k_true > max_rank {
            return Err(Error::validation("dims.k_true", format!("{} exceeds min(d1, d2·n_users) = {max_rank}", d.k_true)));
        }
        self.planted_spectrum()?;
        positive("mdp.n_states", self.mdp.n_states)?;
        positive("mdp.n_actions", self.mdp.n_actions)?;
        positive("mdp.horizon", self.mdp.horizon)?;
        finite_non_negative("mdp.feature_scale", self.mdp.feature_scale)?;
        positive("data.n_pairs", self.data.n_pairs)?;
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::validation("data.test_fraction", format!("{} outside [0, 1)", self.data.test_fraction)));
        }
        let n_test = (self.data.test_fraction * self.data.n_pairs as f64).round() as usize;
        if n_test >= self.data.n_pairs {
            return Err(Error::validation("data.test_fraction", "leaves no training pairs"));
        }
        self.train.validate().map_err(|e| match e {
            Error::Validation { field, msg } => Error::validation(format!("train.{field}"), msg),
            other => other,
        })?;
        finite_non_negative("plan.zeta_scale", self.plan.zeta_scale)?;
        if !(self.plan.delta > 0.0 && self.plan.delta <= 1.0) {
            return Err(Error::validation("plan.delta", format!("{} outside (0, 1]", self.plan.delta)));
        }
        positive("plan.fw_iters", self.plan.fw_iters)?;
        finite_non_negative("plan.gap_tol", self.plan.gap_tol)?;
        if let Some(r) = self.plan.min_residual {
            finite_non_negative("plan.min_residual", r)?;
        }
        if let HeadSpec::Tanh { range } = self.head {
            if !(range > 0.0) || !range.is_finite() {
                return Err(Error::validation("head.range", "must be positive and finite"));
            }
        }
        if let ThetaInitMode::Gaussian { std } = self.theta_init {
            finite_non_negative("theta_init.std", std)?;
        }
        if !(self.frob_bound > 0.0) || !self.frob_bound.is_finite() {
            return Err(Error::validation("frob_bound", "must be positive and finite"));
        }
        Ok(())
    }

    /// Leading values followed by the evenly spread tail.
    pub fn planted_spectrum(&self) -> Result<Vec<f64>> {
        let d = &self.dims;
        let s = &self.spectrum;
        if s.leading.len() != d.k_true {
            return Err(Error::validation("spectrum.leading", format!("expected {} values (dims.k_true), found {}", d.k_true, s.leading.len())));
        }
        if s.leading.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::validation("spectrum.leading", "values must be positive and finite"));
        }
        if s.leading.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::validation("spectrum.leading", "values must be non-increasing"));
        }
        finite_non_negative("spectrum.tail_energy", s.tail_energy)?;
        let mut out = s.leading.clone();
        if s.tail_energy > 0.0 {
            let room = d.d1.min(d.d2 * d.n_users) - d.k_true;
            let rank = s.tail_rank.unwrap_or(room);
            if rank == 0 || rank > room {
                return Err(Error::validation("spectrum.tail_rank", format!("must lie in 1..={room}")));
            }
            let each = (s.tail_energy / rank as f64).sqrt();
            if each > out[d.k_true - 1] {
                return Err(Error::validation("spectrum.tail_energy", "tail values would exceed the last leading value"));
            }
            out.extend(std::iter::repeat(each).take(rank));
        }
        Ok(out)
    }

    fn fw_options(&self) -> FwOptions {
        FwOptions { iters: self.plan.fw_iters, gap_tol: self.plan.gap_tol, step: self.plan.step }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

/// Everything drawn for one seed before training.
#[derive(Clone, Debug)]
pub struct Instance {
    pub mdp: TabularMdp<f64>,
    pub truth: GroundTruth<f64>,
    pub mu0: MarkovPolicy<f64>,
    pub mu1: MarkovPolicy<f64>,
    pub dataset: PreferenceDataset<f64>,
}

fn reference_policy(mdp: &TabularMdp<f64>, kind: RefPolicy, seed: u64, slot: u64) -> MarkovPolicy<f64> {
    match kind {
        RefPolicy::Uniform => MarkovPolicy::uniform(mdp),
        RefPolicy::Random => MarkovPolicy::random(mdp, &mut stream(seed, "reference-policy", 0, slot)),
    }
}

/// Draws the MDP, ground truth, reference policies, and dataset for
/// `cfg.seed`. Streams are keyed by seed and purpose only, so runs that
/// differ in `n_pairs` see nested datasets on the same instance.
pub fn build_instance(cfg: &ExperimentConfig) -> Result<Instance> {
    cfg.validate()?;
    let d = &cfg.dims;
    let m = &cfg.mdp;
    let mdp = make_random_mdp(m.n_states, m.n_actions, m.horizon, (d.d1, d.d2), m.feature_scale, &mut stream(cfg.seed, "mdp", 0, 0))?;
    let truth = synthesize_ground_truth(
        d.d1,
        d.d2,
        d.n_users,
        d.k_true,
        &cfg.planted_spectrum()?,
        cfg.theta_init,
        cfg.frob_bound,
        &mut stream(cfg.seed, "truth", 0, 0),
    )?;
    let mu0 = reference_policy(&mdp, cfg.data.mu0, cfg.seed, 0);
    let mu1 = reference_policy(&mdp, cfg.data.mu1, cfg.seed, 1);
    let head = RewardHead::from_spec(&cfg.head)?;
    let dataset = generate_dataset(&mdp, &truth, cfg.data.n_pairs, &mu0, &mu1, &head, cfg.seed)?;
    Ok(Instance { mdp, truth, mu0, mu1, dataset })
}

/// Trains the model selected by `algo` on `train`.
pub fn train_algo(
    algo: Algo,
    cfg: &ExperimentConfig,
    theta_init: &Matrix<f64>,
    train: &PreferenceDataset<f64>,
) -> Result<(Checkpoint<f64>, TrainReport)> {
    let head = RewardHead::from_spec(&cfg.head)?;
    let tc = cfg.train_config();
    let (k, n) = (cfg.dims.k_model, cfg.dims.n_users);
    if let Some(mode) = algo.share_mode() {
        let init = SharedLoraModel::init(theta_init.clone(), mode, k, n, cfg.frob_bound, head, cfg.seed)?;
        let (model, report) = train_share_lora(train, &init, &tc)?;
        return Ok((Checkpoint::Shared(model), report));
    }
    let kind = algo.baseline().expect("every algorithm is shared or a baseline");
    let init = BaselineModel::init(kind, theta_init.clone(), k, n, cfg.frob_bound, head, cfg.seed)?;
    let (model, report) = train_baseline(train, &init, &tc)?;
    Ok((Checkpoint::Baseline(model), report))
}

fn checkpoint_accuracy(ckpt: &Checkpoint<f64>, test: &PreferenceDataset<f64>) -> Result<Accuracy> {
    match ckpt {
        Checkpoint::Shared(m) => pref_accuracy(m, test),
        Checkpoint::Baseline(m) => pref_accuracy(m, test),
    }
}

pub fn checkpoint_log_likelihood(ckpt: &Checkpoint<f64>, ds: &PreferenceDataset<f64>) -> Result<f64> {
    match ckpt {
        Checkpoint::Shared(m) => log_likelihood(m, ds),
        Checkpoint::Baseline(m) => log_likelihood(m, ds),
    }
}

/// `ζ` from the measured diversity of the planted truth.
pub fn zeta_for(cfg: &ExperimentConfig, truth: &GroundTruth<f64>, n_train_pairs: usize) -> Result<f64> {
    let div = &truth.diversity;
    let min_residual = cfg.plan.min_residual.unwrap_or(div.tail / div.n_users as f64);
    compute_zeta(&ZetaInputs {
        n_users: div.n_users,
        n_pairs: n_train_pairs,
        nu: div.nu,
        tail: div.tail,
        k: cfg.dims.k_model,
        d1: cfg.dims.d1,
        d2: cfg.dims.d2,
        delta: cfg.plan.delta,
        min_residual,
        zeta_scale: cfg.plan.zeta_scale,
    })
}

/// Plans every user against `mu0` with confidence sets around the model's
/// updates, reporting value gaps against the truth.
pub fn plan_checkpoint(
    cfg: &ExperimentConfig,
    inst: &Instance,
    ckpt: &Checkpoint<f64>,
    zeta: f64,
) -> Result<Vec<(PlanReport, MarkovPolicy<f64>)>> {
    let centers: Vec<Matrix<f64>> = (0..ckpt.n_users()).map(|i| ckpt.delta_theta(i)).collect();
    let stars: Vec<Matrix<f64>> = (0..inst.truth.n_users()).map(|i| inst.truth.theta_star(i)).collect();
    let theta_init = match ckpt {
        Checkpoint::Shared(m) => crate::reward::RewardModel::theta_init(m).clone(),
        Checkpoint::Baseline(m) => crate::reward::RewardModel::theta_init(m).clone(),
    };
    plan_users(&inst.mdp, &theta_init, &centers, zeta, &inst.mu0, ckpt.head(), Some(&stars), &cfg.fw_options())
}

/// Outputs of one seeded pipeline run.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub row: SweepRow,
    pub checkpoint: Checkpoint<f64>,
    pub train_report: TrainReport,
    pub plans: Vec<PlanReport>,
}

/// synth → train → diagnose → plan for one configuration. Wall time is
/// recorded only when `timed` is set.
pub fn run_cell(cfg: &ExperimentConfig, timed: bool) -> Result<CellOutcome> {
    let start = Instant::now();
    let inst = build_instance(cfg)?;
    let (train, test) = inst.dataset.split_holdout(cfg.data.test_fraction)?;
    let (ckpt, report) = train_algo(cfg.algo, cfg, &inst.truth.theta_init, &train)?;
    let div = &inst.truth.diversity;
    let mut row = SweepRow::blank(cfg, cfg.seed);
    row.tail = div.tail;
    row.nu = div.nu;
    row.n_pairs = train.n_pairs();
    row.ll_final = checkpoint_log_likelihood(&ckpt, &train)?;
    if let Checkpoint::Shared(m) = &ckpt {
        row.dist_b = subspace_error(m, &inst.truth)?.dist;
        row.dk_ratio = match davis_kahan_ratio(m, &inst.truth) {
            Ok(r) => r,
            Err(Error::DegenerateSpectrum) => f64::NAN,
            Err(e) => return Err(e),
        };
    }
    if !test.is_empty() {
        let acc = checkpoint_accuracy(&ckpt, &test)?.mean;
        row.acc_model = acc;
        match cfg.algo {
            Algo::ShareLeft | Algo::ShareRight => row.acc_share = acc,
            Algo::Local => row.acc_local = acc,
            Algo::Global => row.acc_global = acc,
            Algo::Full => {}
        }
        if cfg.compare_baselines {
            for other in [Algo::ShareLeft, Algo::Local, Algo::Global] {
                let slot = match other {
                    Algo::ShareLeft => &mut row.acc_share,
                    Algo::Local => &mut row.acc_local,
                    _ => &mut row.acc_global,
                };
                if slot.is_nan() {
                    let (c, _) = train_algo(other, cfg, &inst.truth.theta_init, &train)?;
                    *slot = checkpoint_accuracy(&c, &test)?.mean;
                }
            }
        }
    }
    let mut plans = Vec::new();
    if cfg.plan.enabled && ckpt.head().is_linear() {
        let zeta = zeta_for(cfg, &inst.truth, train.n_pairs())?;
        plans = plan_checkpoint(cfg, &inst, &ckpt, zeta)?.into_iter().map(|(r, _)| r).collect();
        row.zeta = zeta;
        let gaps: Vec<f64> = plans.iter().filter_map(|p| p.value_gap).collect();
        if !gaps.is_empty() {
            row.mean_value_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
        }
        row.fw_gap_max = plans.iter().map(|p| p.fw_gap).fold(f64::NEG_INFINITY, f64::max);
    }
    if timed {
        row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    }
    Ok(CellOutcome { row, checkpoint: ckpt, train_report: report, plans })
}
