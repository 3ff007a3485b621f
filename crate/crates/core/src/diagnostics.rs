//! Measurements that compare trained models with the planted truth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GroundTruth, PreferenceDataset};
use crate::error::{Error, Result};
use crate::linalg::{orthonormalize, principal_angle_dist, svd, Matrix};
use crate::mdp::{expected_features, occupancy, trajectory_distribution, trajectory_features, MarkovPolicy, TabularMdp};
use crate::reward::{pref_prob, RewardHead, RewardModel, ShareMode, SharedLoraModel};
use crate::rng::{gaussian, uniform};
use crate::scalar::Scalar;

/// Which side of `ΔΘ` a subspace measurement refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorSide {
    /// Column space in `R^{d₁}`.
    Left,
    /// Row space in `R^{d₂}` of the vertically stacked user updates.
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubspaceError<T> {
    pub dist: T,
    pub side: FactorSide,
}

/// Unit roundoff scaled for a few hundred accumulated operations.
const ROUNDING: f64 = 256.0 * f64::EPSILON;

/// `σ` if it is resolvable relative to `σ₁`, zero otherwise.
fn resolved<T: Scalar>(sigma: f64, sigma_1: f64) -> T {
    if sigma > ROUNDING * sigma_1 {
        T::of(sigma)
    } else {
        T::zero()
    }
}

/// Estimated basis and reference basis plus `σ_k` of the reference matrix.
fn bases<T: Scalar>(model: &SharedLoraModel<T>, truth: &GroundTruth<T>) -> Result<(Matrix<T>, Matrix<T>, T, FactorSide)> {
    let k = model.rank();
    if k != truth.k() {
        return Err(Error::invalid(format!("model rank {k} differs from truth rank {}", truth.k())));
    }
    if model.dims() != truth.dims() || model.n_users() != truth.n_users() {
        return Err(Error::dims("model and truth disagree on dimensions or user count"));
    }
    match model.share_mode() {
        ShareMode::ShareLeft => {
            let approx = truth.rank_k()?;
            let spectrum = &truth.diversity.spectrum;
            Ok((orthonormalize(model.shared_factor()), approx.b_diamond, resolved(spectrum[k - 1], spectrum[0]), FactorSide::Left))
        }
        ShareMode::ShareRight => {
            let (_, d2) = truth.dims();
            if k > d2 {
                return Err(Error::invalid(format!("rank {k} exceeds d2 = {d2}")));
            }
            let blocks: Vec<Matrix<T>> = (0..truth.n_users()).map(|i| truth.user_delta(i)).collect();
            let stacked = Matrix::vcat(&blocks)?;
            let s = svd(&stacked)?;
            let reference = s.right_vectors.column_block(0, k);
            let sigma_k = resolved(s.singular_values[k - 1].as_f64(), s.singular_values[0].as_f64());
            Ok((orthonormalize(&model.shared_factor().transpose()), reference, sigma_k, FactorSide::Right))
        }
    }
}

/// `dist(B̂, B◇)` with `B̂` the orthonormalized shared factor.
pub fn subspace_error<T: Scalar>(model: &SharedLoraModel<T>, truth: &GroundTruth<T>) -> Result<SubspaceError<T>> {
    let (est, reference, _, side) = bases(model, truth)?;
    Ok(SubspaceError { dist: principal_angle_dist(&est, &reference)?, side })
}

/// `dist(B̂,B◇)²·σ_k(ΔΘ*)² / ‖ΔΘ̂ − ΔΘ*‖_F²`.
pub fn davis_kahan_ratio<T: Scalar>(model: &SharedLoraModel<T>, truth: &GroundTruth<T>) -> Result<T> {
    let (est, reference, sigma_k, _) = bases(model, truth)?;
    if !(sigma_k > T::zero()) {
        return Err(Error::DegenerateSpectrum);
    }
    let dist = principal_angle_dist(&est, &reference)?;
    if dist.as_f64() <= ROUNDING {
        return Ok(T::zero());
    }
    let numerator = dist * dist * sigma_k * sigma_k;
    if numerator == T::zero() {
        return Ok(T::zero());
    }
    let denom = (&model.assemble_delta_theta() - &truth.delta_theta_star).frobenius_sq();
    Ok(numerator / denom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub per_user: Vec<f64>,
    pub mean: f64,
}

/// Fraction of held-out labels matched by predicting 1 iff `P(o=1) ≥ 0.5`.
pub fn pref_accuracy<T: Scalar, M: RewardModel<T>>(model: &M, test: &PreferenceDataset<T>) -> Result<Accuracy> {
    if test.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty test set".into()));
    }
    if test.n_users() != model.n_users() || test.dims() != model.dims() {
        return Err(Error::dims("test set does not match the model"));
    }
    let half = T::of(0.5);
    let mut per_user = Vec::with_capacity(test.n_users());
    for (user, samples) in test.per_user().iter().enumerate() {
        let mut hits = 0usize;
        for s in samples {
            let predicted = u8::from(pref_prob(model, user, s.f0(), s.f1())? >= half);
            hits += usize::from(predicted == s.label());
        }
        per_user.push(hits as f64 / samples.len() as f64);
    }
    let mean = per_user.iter().sum::<f64>() / per_user.len() as f64;
    Ok(Accuracy { per_user, mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    /// Exact `D` over independent `τ₀ ∼ μ₀`, `τ₁ ∼ μ₁`.
    pub d_exact: f64,
    /// Weighted empirical `D̂`.
    pub d_hat: f64,
    /// `D̂/D`; `None` when `D = 0`.
    pub ratio: Option<f64>,
    pub within_window: bool,
    pub degenerate: bool,
}

/// Compares the empirical squared reward-gap discrepancy between `θ_a` and
/// `θ_b` on `pairs` (feature pairs with weights) to its exact expectation.
#[allow(clippy::too_many_arguments)]
pub fn concentration_check_weighted<T: Scalar>(
    theta_a: &Matrix<T>,
    theta_b: &Matrix<T>,
    head: &RewardHead<T>,
    mdp: &TabularMdp<T>,
    mu0: &MarkovPolicy<T>,
    mu1: &MarkovPolicy<T>,
    pairs: &[(Matrix<T>, Matrix<T>, T)],
    cap: u128,
) -> Result<Concentration> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("concentration check needs at least one pair".into()));
    }
    if theta_a.shape() != mdp.feature_dims() || theta_b.shape() != mdp.feature_dims() {
        return Err(Error::dims("parameters do not match the MDP features"));
    }
    let g = |f: &Matrix<T>| head.apply(theta_a.inner(f)) - head.apply(theta_b.inner(f));
    let side = |pol: &MarkovPolicy<T>| -> Result<Vec<(T, T)>> {
        trajectory_distribution(mdp, pol, cap)?.into_iter().map(|(tau, p)| Ok((g(&trajectory_features(mdp, &tau)?), p))).collect()
    };
    let (g0, g1) = (side(mu0)?, side(mu1)?);
    let mut d = T::zero();
    let mut mag = T::zero();
    for &(a, pa) in &g0 {
        mag = mag.max(a.abs());
        for &(b, pb) in &g1 {
            mag = mag.max(b.abs());
            d += pa * pb * (a - b) * (a - b);
        }
    }
    let floor = T::of(64.0) * T::epsilon() * mag;
    let (mut num, mut den) = (T::zero(), T::zero());
    for (f0, f1, w) in pairs {
        let e = g(f0) - g(f1);
        num += *w * e * e;
        den += *w;
    }
    let d_hat = (num / den).as_f64();
    let d_exact = d.as_f64();
    if d <= floor * floor {
        return Ok(Concentration { d_exact, d_hat, ratio: None, within_window: d_hat == 0.0, degenerate: true });
    }
    let ratio = d_hat / d_exact;
    Ok(Concentration { d_exact, d_hat, ratio: Some(ratio), within_window: (0.9..=1.1).contains(&ratio), degenerate: false })
}

/// [`concentration_check_weighted`] with unit weights.
#[allow(clippy::too_many_arguments)]
pub fn concentration_check<T: Scalar>(
    theta_a: &Matrix<T>,
    theta_b: &Matrix<T>,
    head: &RewardHead<T>,
    mdp: &TabularMdp<T>,
    mu0: &MarkovPolicy<T>,
    mu1: &MarkovPolicy<T>,
    pairs: &[(Matrix<T>, Matrix<T>)],
    cap: u128,
) -> Result<Concentration> {
    let weighted: Vec<_> = pairs.iter().map(|(a, b)| (a.clone(), b.clone(), T::one())).collect();
    concentration_check_weighted(theta_a, theta_b, head, mdp, mu0, mu1, &weighted, cap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrabilityEstimate {
    /// Running maximum of the ratio, clipped at 0; a lower bound on the sup.
    pub value: f64,
    pub n_samples: usize,
    /// Samples whose denominator vanished.
    pub skipped: usize,
}

/// Monte-Carlo lower bound on the concentrability coefficient of user `i`
/// over linear rewards `Θ` drawn uniformly from the Frobenius ball of
/// `radius` around `center`.
#[allow(clippy::too_many_arguments)]
pub fn concentrability_estimate<T: Scalar, R: Rng + ?Sized>(
    theta_star: &Matrix<T>,
    center: &Matrix<T>,
    radius: T,
    pi_tar: &MarkovPolicy<T>,
    mu_ref: &MarkovPolicy<T>,
    mdp: &TabularMdp<T>,
    n_samples: usize,
    cap: u128,
    rng: &mut R,
) -> Result<ConcentrabilityEstimate> {
    if theta_star.shape() != mdp.feature_dims() || center.shape() != mdp.feature_dims() {
        return Err(Error::dims("parameters do not match the MDP features"));
    }
    if !(radius >= T::zero()) {
        return Err(Error::invalid("radius must be non-negative"));
    }
    let phi_gap = &expected_features(mdp, &occupancy(mdp, pi_tar)?) - &expected_features(mdp, &occupancy(mdp, mu_ref)?);
    let reference: Vec<(Matrix<T>, T)> = trajectory_distribution(mdp, mu_ref, cap)?
        .into_iter()
        .map(|(tau, p)| Ok((trajectory_features(mdp, &tau)?, p)))
        .collect::<Result<_>>()?;
    let (d1, d2) = mdp.feature_dims();
    let dim = (d1 * d2) as f64;
    let mut best = 0.0f64;
    let mut skipped = 0;
    for _ in 0..n_samples {
        let mut dir = Matrix::from_fn(d1, d2, |_, _| gaussian::<T, _>(rng));
        let n = dir.frobenius();
        let r = radius * T::of(uniform::<f64, _>(rng).powf(1.0 / dim));
        if n > T::zero() {
            dir.scale_mut(r / n);
        }
        let theta = center + &dir;
        let delta = theta_star - &theta;
        let numerator = delta.inner(&phi_gap);
        let g: Vec<(T, T)> = reference.iter().map(|(f, p)| (delta.inner(f), *p)).collect();
        let mut second = T::zero();
        for &(a, pa) in &g {
            for &(b, pb) in &g {
                second += pa * pb * (a - b) * (a - b);
            }
        }
        if !(second > T::zero()) {
            skipped += 1;
            continue;
        }
        best = best.max((numerator / second.sqrt()).as_f64());
    }
    Ok(ConcentrabilityEstimate { value: best, n_samples, skipped })
}

/// Summary of one trained model against its planted truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagReport {
    pub dist_b: f64,
    pub side: FactorSide,
    pub dk_ratio: f64,
    pub pref_accuracy: Option<Accuracy>,
    pub concentration_ratio: Option<f64>,
    pub concentrability_estimate: Option<f64>,
    pub d1: usize,
    pub d2: usize,
    pub n_users: usize,
    pub k: usize,
    pub seed: u64,
}

/// Subspace, Davis-Kahan, and (when a test set is given) accuracy figures.
pub fn diagnose<T: Scalar>(
    model: &SharedLoraModel<T>,
    truth: &GroundTruth<T>,
    test: Option<&PreferenceDataset<T>>,
    seed: u64,
) -> Result<DiagReport> {
    let sub = subspace_error(model, truth)?;
    let dk = davis_kahan_ratio(model, truth)?;
    let acc = match test {
        Some(t) if !t.is_empty() => Some(pref_accuracy(model, t)?),
        _ => None,
    };
    let (d1, d2) = truth.dims();
    Ok(DiagReport {
        dist_b: sub.dist.as_f64(),
        side: sub.side,
        dk_ratio: dk.as_f64(),
        pref_accuracy: acc,
        concentration_ratio: None,
        concentrability_estimate: None,
        d1,
        d2,
        n_users: truth.n_users(),
        k: truth.k(),
        seed,
    })
}
