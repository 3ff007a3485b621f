//! Ground-truth synthesis, preference sampling, and dataset files.

mod file;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{diversity_metrics, generate_planted, optimal_rank_k, DiversitySummary, Matrix, RankKApprox};
use crate::mdp::{sample_trajectory, trajectory_features, MarkovPolicy, TabularMdp, Trajectory};
use crate::reward::{sigmoid, RewardHead};
use crate::rng::{gaussian, stream};
use crate::scalar::Scalar;

pub use file::{load_bundle, load_dataset, save_bundle, save_dataset, DatasetBundle, DATASET_VERSION};

/// How the shared initialization `Θ_init` is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThetaInitMode {
    #[default]
    Zero,
    /// i.i.d. `N(0, std²)` entries.
    Gaussian { std: f64 },
}

/// Planted reward parameters `Θᵢ* = Θ_init + ΔΘᵢ*`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth<T> {
    pub theta_init: Matrix<T>,
    /// `[ΔΘ₁*, …, ΔΘ_N*]`.
    pub delta_theta_star: Matrix<T>,
    pub diversity: DiversitySummary,
    pub frob_bound: T,
    /// Uniform factor applied to the planted matrix to respect `frob_bound`.
    pub scale: T,
}

impl<T: Scalar> GroundTruth<T> {
    pub fn new(theta_init: Matrix<T>, delta_theta_star: Matrix<T>, k: usize, frob_bound: T, scale: T) -> Result<Self> {
        let (d1, d2) = theta_init.shape();
        if delta_theta_star.rows() != d1 || delta_theta_star.cols() % d2 != 0 {
            return Err(Error::dims(format!(
                "ΔΘ* is {:?}, not d1 × (N·{d2}) with d1 = {d1}",
                delta_theta_star.shape()
            )));
        }
        let n_users = delta_theta_star.cols() / d2;
        let diversity = diversity_metrics(&delta_theta_star, k, n_users)?;
        Ok(Self { theta_init, delta_theta_star, diversity, frob_bound, scale })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.theta_init.shape()
    }

    pub fn n_users(&self) -> usize {
        self.delta_theta_star.cols() / self.theta_init.cols()
    }

    pub fn k(&self) -> usize {
        self.diversity.k
    }

    pub fn user_delta(&self, user: usize) -> Matrix<T> {
        let d2 = self.theta_init.cols();
        self.delta_theta_star.column_block(user * d2, d2)
    }

    pub fn theta_star(&self, user: usize) -> Matrix<T> {
        &self.theta_init + &self.user_delta(user)
    }

    /// `B◇`, `W◇` of the top-k truncation of `ΔΘ*`.
    pub fn rank_k(&self) -> Result<RankKApprox<T>> {
        optimal_rank_k(&self.delta_theta_star, self.diversity.k)
    }

    /// `minᵢ ‖ΔΘᵢ* − Θᵢ◇‖_F²` against the rank-k truncation.
    pub fn min_residual(&self) -> Result<T> {
        let approx = self.rank_k()?;
        let d2 = self.theta_init.cols();
        let residual = &self.delta_theta_star - &approx.theta_diamond;
        Ok((0..self.n_users()).map(|i| residual.column_block(i * d2, d2).frobenius_sq()).fold(T::infinity(), T::min))
    }
}

/// Plants `ΔΘ*` with the given singular values, rescales it uniformly when a
/// user slice exceeds `frob_bound`, and draws `Θ_init`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_ground_truth<T: Scalar, R: Rng + ?Sized>(
    d1: usize,
    d2: usize,
    n_users: usize,
    k: usize,
    spectrum: &[T],
    theta_init_mode: ThetaInitMode,
    frob_bound: T,
    rng: &mut R,
) -> Result<GroundTruth<T>> {
    if !(frob_bound > T::zero()) || !frob_bound.is_finite() {
        return Err(Error::invalid("frob_bound must be positive and finite"));
    }
    let mut delta = generate_planted(d1, d2, n_users, k, spectrum, rng)?;
    let widest = (0..n_users).map(|i| delta.column_block(i * d2, d2).frobenius()).fold(T::zero(), T::max);
    let scale = if widest > frob_bound { frob_bound / widest } else { T::one() };
    if scale != T::one() {
        delta.scale_mut(scale);
    }
    let theta_init = match theta_init_mode {
        ThetaInitMode::Zero => Matrix::zeros(d1, d2),
        ThetaInitMode::Gaussian { std } => {
            if !(std >= 0.0) || !std.is_finite() {
                return Err(Error::invalid("theta_init std must be finite and non-negative"));
            }
            Matrix::from_fn(d1, d2, |_, _| T::of(std) * gaussian::<T, _>(rng))
        }
    };
    GroundTruth::new(theta_init, delta, k, frob_bound, scale)
}

/// One labeled comparison, stored by its trajectory feature matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceSample<T> {
    pub(crate) user: usize,
    pub(crate) f0: Matrix<T>,
    pub(crate) f1: Matrix<T>,
    pub(crate) label: u8,
    /// `f0 − f1`.
    pub(crate) diff: Matrix<T>,
}

impl<T: Scalar> PreferenceSample<T> {
    pub fn new(user: usize, f0: Matrix<T>, f1: Matrix<T>, label: u8) -> Result<Self> {
        if f0.shape() != f1.shape() {
            return Err(Error::dims("f0 and f1 differ in shape"));
        }
        if label > 1 {
            return Err(Error::invalid(format!("label must be 0 or 1, got {label}")));
        }
        if !f0.is_finite() || !f1.is_finite() {
            return Err(Error::invalid("feature matrices must be finite"));
        }
        let diff = &f0 - &f1;
        Ok(Self { user, f0, f1, label, diff })
    }

    pub fn user(&self) -> usize {
        self.user
    }

    pub fn f0(&self) -> &Matrix<T> {
        &self.f0
    }

    pub fn f1(&self) -> &Matrix<T> {
        &self.f1
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    /// The same comparison with the trajectories swapped and the label flipped.
    pub fn mirrored(&self) -> Self {
        Self { user: self.user, f0: self.f1.clone(), f1: self.f0.clone(), label: 1 - self.label, diff: self.diff.scaled(-T::one()) }
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Hex SHA-256 of the generating configuration.
    pub config_digest: String,
}

/// Per-user preference samples with equal counts per user.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset<T> {
    d1: usize,
    d2: usize,
    per_user: Vec<Vec<PreferenceSample<T>>>,
    pub provenance: Provenance,
}

impl<T: Scalar> PreferenceDataset<T> {
    pub fn new(d1: usize, d2: usize, per_user: Vec<Vec<PreferenceSample<T>>>) -> Result<Self> {
        if per_user.is_empty() {
            return Err(Error::invalid("a dataset needs at least one user"));
        }
        let n_pairs = per_user[0].len();
        if let Some(i) = per_user.iter().position(|s| s.len() != n_pairs) {
            return Err(Error::invalid(format!("user {i} has {} samples, user 0 has {n_pairs}", per_user[i].len())));
        }
        for (i, samples) in per_user.iter().enumerate() {
            if let Some(s) = samples.iter().find(|s| s.user != i || s.f0.shape() != (d1, d2)) {
                return Err(Error::invalid(format!(
                    "sample of user {} with shape {:?} filed under user {i} of a {d1}x{d2} dataset",
                    s.user,
                    s.f0.shape()
                )));
            }
        }
        Ok(Self { d1, d2, per_user, provenance: Provenance::default() })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d1, self.d2)
    }

    pub fn n_users(&self) -> usize {
        self.per_user.len()
    }

    /// Samples per user.
    pub fn n_pairs(&self) -> usize {
        self.per_user[0].len()
    }

    pub fn len(&self) -> usize {
        self.n_users() * self.n_pairs()
    }

    pub fn is_empty(&self) -> bool {
        self.n_pairs() == 0
    }

    pub fn per_user(&self) -> &[Vec<PreferenceSample<T>>] {
        &self.per_user
    }

    pub fn user(&self, i: usize) -> &[PreferenceSample<T>] {
        &self.per_user[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PreferenceSample<T>> {
        self.per_user.iter().flatten()
    }

    /// First `n_pairs` samples of every user.
    pub fn truncate(&self, n_pairs: usize) -> Result<Self> {
        if n_pairs > self.n_pairs() {
            return Err(Error::invalid(format!("cannot take {n_pairs} of {} samples", self.n_pairs())));
        }
        let per_user = self.per_user.iter().map(|s| s[..n_pairs].to_vec()).collect();
        Ok(Self { d1: self.d1, d2: self.d2, per_user, provenance: self.provenance.clone() })
    }

    /// Keeps only user `i`, re-indexed as user 0.
    pub fn single_user(&self, i: usize) -> Result<Self> {
        if i >= self.n_users() {
            return Err(Error::invalid(format!("user {i} out of range")));
        }
        let samples = self.per_user[i].iter().map(|s| PreferenceSample { user: 0, ..s.clone() }).collect();
        Ok(Self { d1: self.d1, d2: self.d2, per_user: vec![samples], provenance: self.provenance.clone() })
    }

    /// Splits every user's list into a leading training part and a trailing
    /// held-out part of `round(test_fraction · N_p)` samples.
    pub fn split_holdout(&self, test_fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid(format!("test_fraction {test_fraction} outside [0, 1)")));
        }
        let n_test = (test_fraction * self.n_pairs() as f64).round() as usize;
        let cut = self.n_pairs() - n_test;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for s in &self.per_user {
            train.push(s[..cut].to_vec());
            test.push(s[cut..].to_vec());
        }
        Ok((
            Self { d1: self.d1, d2: self.d2, per_user: train, provenance: self.provenance.clone() },
            Self { d1: self.d1, d2: self.d2, per_user: test, provenance: self.provenance.clone() },
        ))
    }
}

/// Two independent trajectories, `τ₀ ∼ μ₀` then `τ₁ ∼ μ₁`.
pub fn sample_pair<T: Scalar, R: Rng + ?Sized>(
    mdp: &TabularMdp<T>,
    mu0: &MarkovPolicy<T>,
    mu1: &MarkovPolicy<T>,
    rng: &mut R,
) -> (Trajectory, Trajectory) {
    let t0 = sample_trajectory(mdp, mu0, rng);
    let t1 = sample_trajectory(mdp, mu1, rng);
    (t0, t1)
}

/// Returns 1 with probability `σ(r0 − r1)`.
pub fn btl_label<T: Scalar, R: Rng + ?Sized>(r0: T, r1: T, rng: &mut R) -> u8 {
    let p = sigmoid(r0 - r1).as_f64();
    u8::from(rng.gen::<f64>() < p)
}

/// Labeled comparisons for every user. User `i` draws from stream
/// `(seed, "data", 0, i)`, so the first `m` samples do not depend on `n_pairs`
/// and the result does not depend on scheduling.
pub fn generate_dataset<T: Scalar>(
    mdp: &TabularMdp<T>,
    truth: &GroundTruth<T>,
    n_pairs: usize,
    mu0: &MarkovPolicy<T>,
    mu1: &MarkovPolicy<T>,
    head: &RewardHead<T>,
    seed: u64,
) -> Result<PreferenceDataset<T>> {
    if truth.dims() != mdp.feature_dims() {
        return Err(Error::dims(format!("truth is {:?}, MDP features are {:?}", truth.dims(), mdp.feature_dims())));
    }
    let shape = (mdp.horizon(), mdp.n_states(), mdp.n_actions());
    if mu0.shape() != shape || mu1.shape() != shape {
        return Err(Error::dims("reference policies do not fit the MDP"));
    }
    let per_user = (0..truth.n_users())
        .into_par_iter()
        .map(|user| -> Result<Vec<PreferenceSample<T>>> {
            let theta = truth.theta_star(user);
            let mut rng = stream(seed, "data", 0, user as u64);
            (0..n_pairs)
                .map(|_| {
                    let (t0, t1) = sample_pair(mdp, mu0, mu1, &mut rng);
                    let f0 = trajectory_features(mdp, &t0)?;
                    let f1 = trajectory_features(mdp, &t1)?;
                    let label = btl_label(head.apply(theta.inner(&f0)), head.apply(theta.inner(&f1)), &mut rng);
                    PreferenceSample::new(user, f0, f1, label)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let (d1, d2) = truth.dims();
    let digest = generation_digest(mdp, truth, n_pairs, mu0, mu1, head, seed);
    Ok(PreferenceDataset::new(d1, d2, per_user)?.with_provenance(Provenance { seed, config_digest: digest }))
}

fn generation_digest<T: Scalar>(
    mdp: &TabularMdp<T>,
    truth: &GroundTruth<T>,
    n_pairs: usize,
    mu0: &MarkovPolicy<T>,
    mu1: &MarkovPolicy<T>,
    head: &RewardHead<T>,
    seed: u64,
) -> String {
    let mut h = Sha256::new();
    let mut reals = |xs: &[T]| xs.iter().for_each(|x| h.update(x.as_f64().to_le_bytes()));
    reals(truth.theta_init.as_slice());
    reals(truth.delta_theta_star.as_slice());
    reals(mdp.initial_dist());
    reals(mdp.transitions());
    mdp.features().iter().for_each(|f| reals(f.as_slice()));
    reals(mu0.as_slice());
    reals(mu1.as_slice());
    h.update(serde_json::to_vec(&head.to_spec()).expect("head spec serializes"));
    h.update((n_pairs as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    hex::encode(h.finalize())
}
