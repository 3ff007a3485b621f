//! Confidence sets around per-user estimates and pessimistic policy
//! extraction by Frank-Wolfe over the occupancy polytope.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::linalg::svd;
use crate::mdp::{
    best_response_dp, enumerate_policies, expected_features, occupancy, occupancy_directions, policy_value, EvalOptions,
    MarkovPolicy, OccupancyMeasure, RewardTable, TabularMdp, DEFAULT_POLICY_CAP,
};
use crate::reward::RewardHead;
use crate::scalar::Scalar;

/// Below this `‖D‖_F` the penalty term is dropped from the supergradient.
pub const SINGULAR_EPS: f64 = 1e-12;

/// `{Θ_init + ΔΘ : ‖ΔΘ − center‖_F² ≤ ζ}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceSet<T> {
    pub user: usize,
    pub center: Matrix<T>,
    /// Squared radius.
    pub zeta: T,
    pub theta_init: Matrix<T>,
}

impl<T: Scalar> ConfidenceSet<T> {
    pub fn new(user: usize, center: Matrix<T>, zeta: T, theta_init: Matrix<T>) -> Result<Self> {
        if !(zeta >= T::zero()) || !zeta.is_finite() {
            return Err(Error::invalid(format!("ζ must be finite and non-negative, got {zeta}")));
        }
        if center.shape() != theta_init.shape() {
            return Err(Error::dims("center and Θ_init shapes differ"));
        }
        Ok(Self { user, center, zeta, theta_init })
    }

    /// `Θ̂ᵢ = Θ_init + ΔΘ̂ᵢ`.
    pub fn theta_hat(&self) -> Matrix<T> {
        &self.theta_init + &self.center
    }

    pub fn contains(&self, delta: &Matrix<T>) -> bool {
        (delta - &self.center).frobenius_sq() <= self.zeta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZetaInputs {
    pub n_users: usize,
    pub n_pairs: usize,
    pub nu: f64,
    pub tail: f64,
    pub k: usize,
    pub d1: usize,
    pub d2: usize,
    pub delta: f64,
    pub min_residual: f64,
    pub zeta_scale: f64,
}

/// Squared confidence radius.
///
/// `scale² · [min_residual + k(d₁+N d₂)·log(N N_p/δ)/(N N_p ν) + √(tail/N)/ν + (k d₂ + log(N/δ))/N_p]`
pub fn compute_zeta(z: &ZetaInputs) -> Result<f64> {
    if z.n_users == 0 || z.n_pairs == 0 {
        return Err(Error::invalid("N and N_p must be at least 1"));
    }
    if !(z.delta > 0.0 && z.delta <= 1.0) {
        return Err(Error::invalid(format!("δ must lie in (0, 1], got {}", z.delta)));
    }
    for (name, v) in [("tail", z.tail), ("min_residual", z.min_residual), ("zeta_scale", z.zeta_scale), ("nu", z.nu)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    if z.nu == 0.0 {
        return Err(Error::DegenerateDiversity);
    }
    let (n, np) = (z.n_users as f64, z.n_pairs as f64);
    let k = z.k as f64;
    let bracket = k * (z.d1 as f64 + n * z.d2 as f64) * (n * np / z.delta).ln() / (n * np * z.nu);
    let bias = (z.tail / n).sqrt() / z.nu;
    let local = (k * z.d2 as f64 + (n / z.delta).ln()) / np;
    Ok(z.zeta_scale * z.zeta_scale * (z.min_residual + bracket + bias + local))
}

/// `D(π) = Φ_π − Φ_{μ_ref}`.
pub fn feature_gap<T: Scalar>(mdp: &TabularMdp<T>, occ: &OccupancyMeasure<T>, mu_ref: &MarkovPolicy<T>) -> Result<Matrix<T>> {
    Ok(&expected_features(mdp, occ) - &expected_features(mdp, &occupancy(mdp, mu_ref)?))
}

fn objective<T: Scalar>(theta_hat: &Matrix<T>, radius: T, d: &Matrix<T>) -> T {
    theta_hat.inner(d) - radius * d.frobenius()
}

fn require_linear<T: Scalar>(head: &RewardHead<T>) -> Result<()> {
    if head.is_linear() {
        Ok(())
    } else {
        Err(Error::Unsupported("pessimistic planning needs a linear reward head".into()))
    }
}

/// `min_{r∈Rᵢ} J(π; r) − E_{μ_ref}[r] = ⟨Θ̂ᵢ, D⟩ − √ζ‖D‖_F`.
pub fn pessimistic_value<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &MarkovPolicy<T>,
    cs: &ConfidenceSet<T>,
    mu_ref: &MarkovPolicy<T>,
    head: &RewardHead<T>,
) -> Result<T> {
    require_linear(head)?;
    pessimistic_value_of(mdp, &occupancy(mdp, policy)?, cs, mu_ref)
}

/// [`pessimistic_value`] for an occupancy measure.
pub fn pessimistic_value_of<T: Scalar>(
    mdp: &TabularMdp<T>,
    occ: &OccupancyMeasure<T>,
    cs: &ConfidenceSet<T>,
    mu_ref: &MarkovPolicy<T>,
) -> Result<T> {
    if cs.center.shape() != mdp.feature_dims() {
        return Err(Error::dims("confidence set does not match the MDP features"));
    }
    Ok(objective(&cs.theta_hat(), cs.zeta.sqrt(), &feature_gap(mdp, occ, mu_ref)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `γ_t = 2/(t+2)`.
    Classic,
    /// `γ_t = 2/(t+2)`, halved until the objective does not decrease.
    Monotone,
    /// Exact maximization along the segment (golden section).
    LineSearch,
    /// Pairwise steps toward the new vertex, then re-optimization over the
    /// active vertex set between vertex calls. Never decreases the objective.
    #[default]
    Pairwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FwOptions {
    pub iters: usize,
    pub gap_tol: f64,
    pub step: StepRule,
}

impl Default for FwOptions {
    fn default() -> Self {
        Self { iters: 500, gap_tol: 1e-6, step: StepRule::Pairwise }
    }
}

#[derive(Clone, Debug)]
pub struct FwResult<T> {
    pub policy: MarkovPolicy<T>,
    pub occupancy: OccupancyMeasure<T>,
    /// Pessimistic value of the returned iterate.
    pub value: T,
    /// Certified bound on `V* − value`.
    pub gap: T,
    pub iters: usize,
    /// Objective after each iteration.
    pub trace: Vec<T>,
}

/// Span of `{Φ_π − Φ_μ : π}` and a right inverse of `δ ↦ Σ δ_h(s,a) f(h,s,a)`
/// on it.
struct FeatureSpan<T> {
    /// `m×q`, orthonormal, over vectorized features.
    basis: Matrix<T>,
    /// `n×m`; maps `x` in the span to an occupancy direction with features `x`.
    lift: Matrix<T>,
}

fn feature_span<T: Scalar>(mdp: &TabularMdp<T>) -> Result<Option<FeatureSpan<T>>> {
    let Some(dirs) = occupancy_directions(mdp)? else { return Ok(None) };
    let features = mdp.features();
    let m = features[0].as_slice().len();
    let f = Matrix::from_fn(m, features.len(), |i, j| features[j].as_slice()[i]);
    let s = svd(&f.matmul(&dirs))?;
    let tol = T::of(1e-10) * s.singular_values[0].max(T::one());
    let q = s.singular_values.iter().filter(|&&x| x > tol).count();
    if q == 0 {
        return Ok(None);
    }
    let u = s.left_vectors.column_block(0, q);
    let inv = Matrix::from_diagonal(q, q, &s.singular_values[..q].iter().map(|&x| T::one() / x).collect::<Vec<_>>());
    let lift = dirs.matmul(&s.right_vectors.column_block(0, q)).matmul(&inv).matmul_t(&u);
    Ok(Some(FeatureSpan { basis: u, lift }))
}

fn vectorized<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(x.as_slice().len(), 1, |i, _| x.as_slice()[i])
}

/// `max_d ⟨g, Φ_d − Φ_ref⟩`: an upper bound on `V*` whenever
/// `g = Θ̂ − √ζ·u` with `‖u‖_F ≤ 1`.
fn dual_bound<T: Scalar>(mdp: &TabularMdp<T>, g: &Matrix<T>, phi_ref: &Matrix<T>) -> Result<T> {
    let (_, best) = best_response_dp(mdp, &RewardTable::linear(mdp, g)?);
    Ok(best - g.inner(phi_ref))
}

/// Maximizes `V(d) = ⟨Θ̂ᵢ, D(d)⟩ − √ζ‖D(d)‖_F` over occupancy measures,
/// starting from the best of `μ_ref`, the `Θ̂ᵢ`-greedy policy, and the
/// boundary point in the direction of `Θ̂ᵢ` projected onto the feasible span. The returned gap is `min_t (V_t + g_t) − V_best`,
/// which bounds the suboptimality of the best iterate.
pub fn frank_wolfe_plan<T: Scalar>(
    mdp: &TabularMdp<T>,
    cs: &ConfidenceSet<T>,
    mu_ref: &MarkovPolicy<T>,
    opts: &FwOptions,
) -> Result<FwResult<T>> {
    if opts.iters == 0 {
        return Err(Error::invalid("Frank-Wolfe needs at least one iteration"));
    }
    if cs.center.shape() != mdp.feature_dims() {
        return Err(Error::dims("confidence set does not match the MDP features"));
    }
    let theta_hat = cs.theta_hat();
    let radius = cs.zeta.sqrt();
    let ref_occ = occupancy(mdp, mu_ref)?;
    let phi_ref = expected_features(mdp, &ref_occ);
    let value_of = |phi: &Matrix<T>| objective(&theta_hat, radius, &(phi - &phi_ref));

    let mut upper = T::infinity();
    let mut starts = vec![occupancy(mdp, &best_response_dp(mdp, &RewardTable::linear(mdp, &theta_hat)?).0)?];
    if let Some(span) = feature_span(mdp)? {
        // Θ̂ restricted to the span decides whether μ_ref itself is optimal.
        let coords = span.basis.t_matmul(&vectorized(&theta_hat));
        let theta_l = span.basis.matmul(&coords);
        let norm_l = theta_l.frobenius();
        let mut g = theta_hat.clone();
        if norm_l > T::zero() {
            let u = Matrix::new(theta_hat.rows(), theta_hat.cols(), theta_l.as_slice().to_vec())?;
            g.axpy(-radius / radius.max(norm_l), &u);
        }
        upper = dual_bound(mdp, &g, &phi_ref)?;
        // Farthest feasible point along the ray d_ref + t·δ with features Θ̂_L.
        let delta = span.lift.matmul(&theta_l);
        let big = delta.as_slice().iter().fold(T::zero(), |m, x| m.max(x.abs()));
        let mut t_max = T::infinity();
        for (&x, &dx) in ref_occ.as_slice().iter().zip(delta.as_slice()) {
            if dx < -T::of(1e-12) * big {
                t_max = t_max.min(x / -dx);
            }
        }
        if t_max.is_finite() && t_max > T::zero() {
            let raw = ref_occ.as_slice().iter().zip(delta.as_slice()).map(|(&x, &dx)| (x + t_max * dx).max(T::zero())).collect();
            starts.push(occupancy(mdp, &OccupancyMeasure::from_raw(mdp, raw).to_policy())?);
        }
    }
    let (mut d, mut phi) = (ref_occ, phi_ref.clone());
    let mut v = value_of(&phi);
    for start in starts {
        let p = expected_features(mdp, &start);
        let candidate = value_of(&p);
        if candidate > v {
            (d, phi, v) = (start, p, candidate);
        }
    }
    let (mut best_d, mut best_v) = (d.clone(), v);
    let mut directions: Vec<Matrix<T>> = Vec::with_capacity(opts.iters);
    let mut atoms = vec![Atom { occupancy: d.clone(), phi: phi.clone(), weight: T::one() }];
    let mut trace = Vec::with_capacity(opts.iters);
    let mut iters = 0;
    let tol = T::of(opts.gap_tol);

    for t in 0..opts.iters {
        iters = t + 1;
        let gap_vec = &phi - &phi_ref;
        let norm = gap_vec.frobenius();
        let grad = supergradient(&theta_hat, radius, &gap_vec);
        let rewards = RewardTable::linear(mdp, &grad)?;
        let (vertex_policy, _) = best_response_dp(mdp, &rewards);
        let vertex = occupancy(mdp, &vertex_policy)?;
        let phi_vertex = expected_features(mdp, &vertex);
        let fw_gap = grad.inner(&phi_vertex) - grad.inner(&phi);
        if !fw_gap.is_finite() {
            return Err(Error::NumericalFailure { epoch: t, detail: "non-finite Frank-Wolfe gap".into() });
        }
        upper = upper.min(v + fw_gap.max(T::zero()));
        if norm > T::of(SINGULAR_EPS) && radius > T::zero() {
            // The mean of the recent unit directions is a steadier dual point
            // than the current one.
            directions.push(gap_vec.scaled(T::one() / norm));
            let recent = &directions[directions.len() / 2..];
            let mut g = theta_hat.clone();
            for u in recent {
                g.axpy(-radius / T::of(recent.len() as f64), u);
            }
            upper = upper.min(dual_bound(mdp, &g, &phi_ref)?);
        }
        if upper - best_v < tol {
            trace.push(v);
            break;
        }
        if opts.step == StepRule::Pairwise {
            let iv = match atoms.iter().position(|atom| atom.occupancy == vertex) {
                Some(j) => j,
                None => {
                    atoms.push(Atom { occupancy: vertex, phi: phi_vertex, weight: T::zero() });
                    atoms.len() - 1
                }
            };
            pairwise_step(&mut atoms, &mut phi, iv, &grad, &value_of);
            // Re-optimize over the active set; these steps need no DP.
            for _ in 0..INNER_STEPS {
                let g = supergradient(&theta_hat, radius, &(&phi - &phi_ref));
                let scores: Vec<T> = atoms.iter().map(|atom| g.inner(&atom.phi)).collect();
                let up = (0..atoms.len()).fold(0, |b, j| if scores[j] > scores[b] { j } else { b });
                let down = (0..atoms.len()).filter(|&j| atoms[j].weight > T::zero()).fold(up, |b, j| if scores[j] < scores[b] { j } else { b });
                if scores[up] - scores[down] <= tol * tol {
                    break;
                }
                pairwise_step(&mut atoms, &mut phi, up, &g, &value_of);
            }
            atoms.retain(|atom| atom.weight > T::zero());
            let mut raw = vec![T::zero(); d.as_slice().len()];
            for atom in &atoms {
                for (r, &x) in raw.iter_mut().zip(atom.occupancy.as_slice()) {
                    *r += atom.weight * x;
                }
            }
            d = OccupancyMeasure::from_raw(mdp, raw);
            v = value_of(&phi);
        } else {
            let direction = &phi_vertex - &phi;
            let along = |g: T| {
                let mut p = phi.clone();
                p.axpy(g, &direction);
                value_of(&p)
            };
            let gamma0 = T::of(2.0 / (t as f64 + 2.0));
            let gamma = match opts.step {
                StepRule::Monotone => {
                    let mut g = gamma0;
                    while g > T::of(1e-12) && along(g) < v {
                        g = g * T::of(0.5);
                    }
                    if along(g) < v {
                        T::zero()
                    } else {
                        g
                    }
                }
                StepRule::LineSearch => golden_section(along, T::one()),
                _ => gamma0,
            };
            if gamma > T::zero() {
                d = d.mix(&vertex, gamma);
                phi.axpy(gamma, &direction);
                v = value_of(&phi);
            }
        }
        trace.push(v);
        if v > best_v {
            best_v = v;
            best_d = d.clone();
        }
    }
    let gap = (upper - best_v).max(T::zero());
    Ok(FwResult { policy: best_d.to_policy(), occupancy: best_d, value: best_v, gap, iters, trace })
}

/// `Θ̂ − √ζ·D/‖D‖_F`, or `Θ̂` when `D` is numerically zero.
fn supergradient<T: Scalar>(theta_hat: &Matrix<T>, radius: T, gap: &Matrix<T>) -> Matrix<T> {
    let norm = gap.frobenius();
    let mut g = theta_hat.clone();
    if norm > T::of(SINGULAR_EPS) {
        g.axpy(-radius / norm, gap);
    }
    g
}

const INNER_STEPS: usize = 1000;

struct Atom<T> {
    occupancy: OccupancyMeasure<T>,
    phi: Matrix<T>,
    weight: T,
}

/// Moves weight from the active atom scoring lowest under `grad` to atom
/// `to`, with exact line search.
fn pairwise_step<T: Scalar>(atoms: &mut [Atom<T>], phi: &mut Matrix<T>, to: usize, grad: &Matrix<T>, value_of: &impl Fn(&Matrix<T>) -> T) {
    let Some(away) = (0..atoms.len())
        .filter(|&j| j != to && atoms[j].weight > T::zero())
        .min_by(|&a, &b| grad.inner(&atoms[a].phi).partial_cmp(&grad.inner(&atoms[b].phi)).unwrap_or(std::cmp::Ordering::Equal))
    else {
        return;
    };
    let direction = &atoms[to].phi - &atoms[away].phi;
    if grad.inner(&direction) <= T::zero() {
        return;
    }
    let w_away = atoms[away].weight;
    let along = |g: T| {
        let mut p = phi.clone();
        p.axpy(g, &direction);
        value_of(&p)
    };
    let mut gamma = if w_away <= T::of(1e-12) { w_away } else { golden_section(&along, w_away) };
    if gamma >= w_away * (T::one() - T::of(1e-12)) && along(w_away) >= along(gamma) {
        gamma = w_away;
    }
    if gamma > T::zero() {
        phi.axpy(gamma, &direction);
        atoms[to].weight += gamma;
        atoms[away].weight = if gamma == w_away { T::zero() } else { w_away - gamma };
    }
}

/// Maximizer of a concave function on `[0, hi]`.
fn golden_section<T: Scalar>(f: impl Fn(T) -> T, hi: T) -> T {
    let ratio = T::of((5f64.sqrt() - 1.0) / 2.0);
    let (mut a, mut b) = (T::zero(), hi);
    let mut c = b - ratio * (b - a);
    let mut e = a + ratio * (b - a);
    let (mut fc, mut fe) = (f(c), f(e));
    for _ in 0..80 {
        if fc < fe {
            a = c;
            c = e;
            fc = fe;
            e = a + ratio * (b - a);
            fe = f(e);
        } else {
            b = e;
            e = c;
            fe = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        }
    }
    let mid = (a + b) * T::of(0.5);
    [T::zero(), mid, hi].into_iter().fold(T::zero(), |best, g| if f(g) > f(best) { g } else { best })
}

/// Best deterministic Markov policy for `θ*` under `head`: backward DP for
/// linear heads, enumeration otherwise.
pub fn target_policy<T: Scalar>(mdp: &TabularMdp<T>, theta_star: &Matrix<T>, head: &RewardHead<T>) -> Result<MarkovPolicy<T>> {
    if head.is_linear() {
        return Ok(best_response_dp(mdp, &RewardTable::linear(mdp, theta_star)?).0);
    }
    let mut best: Option<(MarkovPolicy<T>, T)> = None;
    for pi in enumerate_policies(mdp, DEFAULT_POLICY_CAP)? {
        let v = policy_value(mdp, &pi, theta_star, head, EvalOptions::default())?.value;
        if best.as_ref().map_or(true, |(_, b)| v > *b) {
            best = Some((pi, v));
        }
    }
    Ok(best.expect("at least one policy").0)
}

/// `J(π_tar; rᵢ*) − J(π̂; rᵢ*)`, with `π_tar` defaulting to [`target_policy`].
pub fn value_gap<T: Scalar>(
    mdp: &TabularMdp<T>,
    pi_tar: Option<&MarkovPolicy<T>>,
    pi_hat: &MarkovPolicy<T>,
    theta_star: &Matrix<T>,
    head: &RewardHead<T>,
) -> Result<T> {
    let owned;
    let pi_tar = match pi_tar {
        Some(p) => p,
        None => {
            owned = target_policy(mdp, theta_star, head)?;
            &owned
        }
    };
    let tar = policy_value(mdp, pi_tar, theta_star, head, EvalOptions::default())?.value;
    let hat = policy_value(mdp, pi_hat, theta_star, head, EvalOptions::default())?.value;
    Ok(tar - hat)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub user: usize,
    pub zeta: f64,
    pub fw_iters: usize,
    pub fw_gap: f64,
    pub pess_value: f64,
    /// Present when the true parameter is known.
    pub value_gap: Option<f64>,
}

/// Plans for every user in parallel. `centers[i]` is `ΔΘ̂ᵢ`; when
/// `theta_stars` is given, value gaps against the optimal policy are filled in.
#[allow(clippy::too_many_arguments)]
pub fn plan_users<T: Scalar>(
    mdp: &TabularMdp<T>,
    theta_init: &Matrix<T>,
    centers: &[Matrix<T>],
    zeta: T,
    mu_ref: &MarkovPolicy<T>,
    head: &RewardHead<T>,
    theta_stars: Option<&[Matrix<T>]>,
    opts: &FwOptions,
) -> Result<Vec<(PlanReport, MarkovPolicy<T>)>> {
    require_linear(head)?;
    if let Some(stars) = theta_stars {
        if stars.len() != centers.len() {
            return Err(Error::dims("one true parameter per user is required"));
        }
    }
    centers
        .par_iter()
        .enumerate()
        .map(|(user, center)| {
            let cs = ConfidenceSet::new(user, center.clone(), zeta, theta_init.clone())?;
            let fw = frank_wolfe_plan(mdp, &cs, mu_ref, opts)?;
            let gap = match theta_stars {
                Some(stars) => Some(value_gap(mdp, None, &fw.policy, &stars[user], head)?.as_f64()),
                None => None,
            };
            let report = PlanReport {
                user,
                zeta: zeta.as_f64(),
                fw_iters: fw.iters,
                fw_gap: fw.gap.as_f64(),
                pess_value: fw.value.as_f64(),
                value_gap: gap,
            };
            Ok((report, fw.policy))
        })
        .collect()
}
