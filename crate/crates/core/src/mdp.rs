//! Finite-horizon tabular MDPs with matrix-valued step features.
//!
//! A trajectory's feature matrix is `F(τ) = Σ_h f(h, s_h, a_h)`, so every
//! linear reward `⟨Θ, F(τ)⟩_F` is additive over steps and expected values are
//! linear in the occupancy measure.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::reward::RewardHead;
use crate::rng::{categorical, gaussian, uniform, Stream};
use crate::scalar::Scalar;

/// Default cap on the number of deterministic Markov policies enumerated.
pub const DEFAULT_POLICY_CAP: u128 = 4096;
/// Default cap on the number of trajectories enumerated for exact expectations.
pub const DEFAULT_TRAJECTORY_CAP: u128 = 1 << 17;

fn prob_tol<T: Scalar>() -> T {
    T::of(1e-12).max(T::epsilon() * T::of(64.0))
}

fn check_distribution<T: Scalar>(p: &[T], what: &str) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < T::zero()) {
        return Err(Error::invalid(format!("{what} has negative or non-finite mass")));
    }
    let total: T = p.iter().copied().sum();
    if (total - T::one()).abs() > prob_tol::<T>() {
        return Err(Error::invalid(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp<T> {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    initial_dist: Vec<T>,
    /// `[h][s][a][s']`.
    transitions: Vec<T>,
    /// `[h][s][a]`.
    features: Vec<Matrix<T>>,
    feature_bound: T,
}

impl<T: Scalar> TabularMdp<T> {
    /// Validated constructor. `transitions` is laid out `[h][s][a][s']` and
    /// `features` `[h][s][a]`, both for `h` in `0..horizon`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        initial_dist: Vec<T>,
        transitions: Vec<T>,
        features: Vec<Matrix<T>>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || horizon == 0 {
            return Err(Error::invalid("state, action and horizon counts must be at least 1"));
        }
        if initial_dist.len() != n_states {
            return Err(Error::dims("initial distribution length differs from the state count"));
        }
        check_distribution(&initial_dist, "initial distribution")?;
        let slots = horizon * n_states * n_actions;
        if transitions.len() != slots * n_states {
            return Err(Error::dims(format!("expected {} transition entries, got {}", slots * n_states, transitions.len())));
        }
        for (idx, row) in transitions.chunks_exact(n_states).enumerate() {
            check_distribution(row, &format!("transition row {idx}"))?;
        }
        if features.len() != slots {
            return Err(Error::dims(format!("expected {slots} feature matrices, got {}", features.len())));
        }
        let shape = features[0].shape();
        if features.iter().any(|f| f.shape() != shape || !f.is_finite()) {
            return Err(Error::invalid("feature matrices must share one shape and be finite"));
        }
        let feature_bound = features.iter().map(Matrix::frobenius).fold(T::zero(), T::max);
        Ok(Self { n_states, n_actions, horizon, initial_dist, transitions, features, feature_bound })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `(d₁, d₂)` of the step features.
    pub fn feature_dims(&self) -> (usize, usize) {
        self.features[0].shape()
    }

    pub fn initial_dist(&self) -> &[T] {
        &self.initial_dist
    }

    pub fn transitions(&self) -> &[T] {
        &self.transitions
    }

    pub fn features(&self) -> &[Matrix<T>] {
        &self.features
    }

    /// `sup ‖f(h,s,a)‖_F`.
    pub fn feature_bound(&self) -> T {
        self.feature_bound
    }

    #[inline]
    fn slot(&self, h: usize, s: usize, a: usize) -> usize {
        (h * self.n_states + s) * self.n_actions + a
    }

    #[inline]
    pub fn transition(&self, h: usize, s: usize, a: usize) -> &[T] {
        let start = self.slot(h, s, a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    #[inline]
    pub fn feature(&self, h: usize, s: usize, a: usize) -> &Matrix<T> {
        &self.features[self.slot(h, s, a)]
    }

    /// `(|S|·|A|)^H`, saturating.
    pub fn n_trajectories(&self) -> u128 {
        ((self.n_states * self.n_actions) as u128).checked_pow(self.horizon as u32).unwrap_or(u128::MAX)
    }

    /// `|A|^(|S|·H)`, saturating.
    pub fn n_deterministic_policies(&self) -> u128 {
        (self.n_actions as u128).checked_pow((self.n_states * self.horizon) as u32).unwrap_or(u128::MAX)
    }
}

/// Random MDP: Dirichlet(1) initial and transition rows, Gaussian features
/// rescaled so that `sup ‖f‖_F = feature_scale`.
pub fn make_random_mdp<T: Scalar, R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    dims: (usize, usize),
    feature_scale: T,
    rng: &mut R,
) -> Result<TabularMdp<T>> {
    if n_states == 0 || n_actions == 0 || horizon == 0 || dims.0 == 0 || dims.1 == 0 {
        return Err(Error::invalid("all counts must be at least 1"));
    }
    if !(feature_scale >= T::zero()) || !feature_scale.is_finite() {
        return Err(Error::invalid("feature_scale must be finite and non-negative"));
    }
    let dirichlet = |n: usize, rng: &mut R| -> Vec<T> {
        let raw: Vec<T> = (0..n).map(|_| -(T::one() - uniform::<T, _>(rng)).ln() + T::of(1e-12)).collect();
        let total: T = raw.iter().copied().sum();
        raw.into_iter().map(|x| x / total).collect()
    };
    let initial = dirichlet(n_states, rng);
    let slots = horizon * n_states * n_actions;
    let mut transitions = Vec::with_capacity(slots * n_states);
    for _ in 0..slots {
        transitions.extend(dirichlet(n_states, rng));
    }
    let mut features: Vec<Matrix<T>> = (0..slots).map(|_| Matrix::from_fn(dims.0, dims.1, |_, _| gaussian(rng))).collect();
    let bound = features.iter().map(Matrix::frobenius).fold(T::zero(), T::max);
    if bound > T::zero() {
        let factor = feature_scale / bound;
        features.iter_mut().for_each(|f| f.scale_mut(factor));
    }
    TabularMdp::new(n_states, n_actions, horizon, initial, transitions, features)
}

/// Ordered `(state, action)` pairs, one per step.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn validate<T: Scalar>(&self, mdp: &TabularMdp<T>) -> Result<()> {
        if self.steps.len() != mdp.horizon {
            return Err(Error::invalid(format!("trajectory length {} differs from horizon {}", self.steps.len(), mdp.horizon)));
        }
        if let Some((h, &(s, a))) = self.steps.iter().enumerate().find(|(_, &(s, a))| s >= mdp.n_states || a >= mdp.n_actions) {
            return Err(Error::invalid(format!("step {h} has out-of-range pair ({s}, {a})")));
        }
        Ok(())
    }
}

/// Step- and state-dependent stochastic policy.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovPolicy<T> {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    /// `[h][s][a]`.
    probs: Vec<T>,
}

impl<T: Scalar> MarkovPolicy<T> {
    pub fn new(n_states: usize, n_actions: usize, horizon: usize, probs: Vec<T>) -> Result<Self> {
        if probs.len() != n_states * n_actions * horizon {
            return Err(Error::dims("policy table size differs from H·|S|·|A|"));
        }
        for (idx, row) in probs.chunks_exact(n_actions).enumerate() {
            check_distribution(row, &format!("action distribution {idx}"))?;
        }
        Ok(Self { n_states, n_actions, horizon, probs })
    }

    pub fn uniform(mdp: &TabularMdp<T>) -> Self {
        let p = T::one() / T::of(mdp.n_actions as f64);
        Self { n_states: mdp.n_states, n_actions: mdp.n_actions, horizon: mdp.horizon, probs: vec![p; mdp.horizon * mdp.n_states * mdp.n_actions] }
    }

    /// Deterministic policy from a `[h][s]` action table.
    pub fn deterministic(mdp: &TabularMdp<T>, actions: &[Vec<usize>]) -> Result<Self> {
        if actions.len() != mdp.horizon || actions.iter().any(|row| row.len() != mdp.n_states) {
            return Err(Error::dims("action table must be H × |S|"));
        }
        let mut probs = vec![T::zero(); mdp.horizon * mdp.n_states * mdp.n_actions];
        for (h, row) in actions.iter().enumerate() {
            for (s, &a) in row.iter().enumerate() {
                if a >= mdp.n_actions {
                    return Err(Error::invalid(format!("action {a} out of range")));
                }
                probs[(h * mdp.n_states + s) * mdp.n_actions + a] = T::one();
            }
        }
        Ok(Self { n_states: mdp.n_states, n_actions: mdp.n_actions, horizon: mdp.horizon, probs })
    }

    /// Random stochastic policy with Dirichlet(1) action distributions.
    pub fn random<R: Rng + ?Sized>(mdp: &TabularMdp<T>, rng: &mut R) -> Self {
        let mut probs = Vec::with_capacity(mdp.horizon * mdp.n_states * mdp.n_actions);
        for _ in 0..mdp.horizon * mdp.n_states {
            let raw: Vec<T> = (0..mdp.n_actions).map(|_| -(T::one() - uniform::<T, _>(rng)).ln() + T::of(1e-12)).collect();
            let total: T = raw.iter().copied().sum();
            probs.extend(raw.into_iter().map(|x| x / total));
        }
        Self { n_states: mdp.n_states, n_actions: mdp.n_actions, horizon: mdp.horizon, probs }
    }

    #[inline]
    pub fn action_probs(&self, h: usize, s: usize) -> &[T] {
        let start = (h * self.n_states + s) * self.n_actions;
        &self.probs[start..start + self.n_actions]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.probs
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.horizon, self.n_states, self.n_actions)
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.iter().all(|&p| p == T::zero() || p == T::one())
    }

    fn check_against(&self, mdp: &TabularMdp<T>) -> Result<()> {
        if self.shape() != (mdp.horizon, mdp.n_states, mdp.n_actions) {
            return Err(Error::dims(format!("policy shape {:?} does not fit the MDP", self.shape())));
        }
        Ok(())
    }
}

/// Per-step state-action visitation probabilities `d_h(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMeasure<T> {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    /// `[h][s][a]`.
    d: Vec<T>,
}

impl<T: Scalar> OccupancyMeasure<T> {
    /// Raw `[h][s][a]` values; callers are responsible for feasibility.
    pub(crate) fn from_raw(mdp: &TabularMdp<T>, d: Vec<T>) -> Self {
        debug_assert_eq!(d.len(), mdp.horizon * mdp.n_states * mdp.n_actions);
        Self { n_states: mdp.n_states, n_actions: mdp.n_actions, horizon: mdp.horizon, d }
    }

    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> T {
        self.d[(h * self.n_states + s) * self.n_actions + a]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.d
    }

    pub fn step_mass(&self, h: usize) -> T {
        let w = self.n_states * self.n_actions;
        self.d[h * w..(h + 1) * w].iter().copied().sum()
    }

    /// `(1 − λ)·self + λ·other`.
    pub fn mix(&self, other: &Self, lambda: T) -> Self {
        let d = self.d.iter().zip(&other.d).map(|(&a, &b)| (T::one() - lambda) * a + lambda * b).collect();
        Self { n_states: self.n_states, n_actions: self.n_actions, horizon: self.horizon, d }
    }

    /// `π_h(a|s) = d_h(s,a) / Σ_a d_h(s,a)`, uniform on unvisited states.
    pub fn to_policy(&self) -> MarkovPolicy<T> {
        let mut probs = Vec::with_capacity(self.d.len());
        let uniform = T::one() / T::of(self.n_actions as f64);
        for row in self.d.chunks_exact(self.n_actions) {
            let mass: T = row.iter().copied().sum();
            if mass > T::epsilon() * T::epsilon() {
                probs.extend(row.iter().map(|&x| (x / mass).max(T::zero())));
            } else {
                probs.extend(std::iter::repeat(uniform).take(self.n_actions));
            }
        }
        MarkovPolicy { n_states: self.n_states, n_actions: self.n_actions, horizon: self.horizon, probs }
    }

    /// Largest violation of per-step normalization and flow conservation.
    pub fn conservation_defect(&self, mdp: &TabularMdp<T>) -> T {
        let mut worst = T::zero();
        for h in 0..self.horizon {
            worst = worst.max((self.step_mass(h) - T::one()).abs());
        }
        for s in 0..self.n_states {
            let first: T = (0..self.n_actions).map(|a| self.get(0, s, a)).sum();
            worst = worst.max((first - mdp.initial_dist[s]).abs());
        }
        for h in 0..self.horizon.saturating_sub(1) {
            for s_next in 0..self.n_states {
                let lhs: T = (0..self.n_actions).map(|a| self.get(h + 1, s_next, a)).sum();
                let mut rhs = T::zero();
                for s in 0..self.n_states {
                    for a in 0..self.n_actions {
                        rhs += self.get(h, s, a) * mdp.transition(h, s, a)[s_next];
                    }
                }
                worst = worst.max((lhs - rhs).abs());
            }
        }
        worst
    }
}

/// Per-(step, state, action) scalar rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable<T> {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    values: Vec<T>,
}

impl<T: Scalar> RewardTable<T> {
    pub fn from_fn(mdp: &TabularMdp<T>, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(mdp.horizon * mdp.n_states * mdp.n_actions);
        for h in 0..mdp.horizon {
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    values.push(f(h, s, a));
                }
            }
        }
        Self { n_states: mdp.n_states, n_actions: mdp.n_actions, horizon: mdp.horizon, values }
    }

    /// Linear step rewards `⟨θ, f(h,s,a)⟩_F`.
    pub fn linear(mdp: &TabularMdp<T>, theta: &Matrix<T>) -> Result<Self> {
        if theta.shape() != mdp.feature_dims() {
            return Err(Error::dims(format!("θ is {:?}, features are {:?}", theta.shape(), mdp.feature_dims())));
        }
        Ok(Self::from_fn(mdp, |h, s, a| theta.inner(mdp.feature(h, s, a))))
    }

    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> T {
        self.values[(h * self.n_states + s) * self.n_actions + a]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    /// `Σ d_h(s,a) r(h,s,a)`.
    pub fn expectation(&self, occ: &OccupancyMeasure<T>) -> T {
        self.values.iter().zip(&occ.d).map(|(&r, &d)| r * d).sum()
    }
}

/// `F(τ) = Σ_h f(h, s_h, a_h)`.
pub fn trajectory_features<T: Scalar>(mdp: &TabularMdp<T>, tau: &Trajectory) -> Result<Matrix<T>> {
    tau.validate(mdp)?;
    let (d1, d2) = mdp.feature_dims();
    let mut total = Matrix::zeros(d1, d2);
    for (h, &(s, a)) in tau.steps.iter().enumerate() {
        total.axpy(T::one(), mdp.feature(h, s, a));
    }
    Ok(total)
}

/// Exact forward recursion for the occupancy measure of a Markov policy.
pub fn occupancy<T: Scalar>(mdp: &TabularMdp<T>, policy: &MarkovPolicy<T>) -> Result<OccupancyMeasure<T>> {
    policy.check_against(mdp)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut d = vec![T::zero(); mdp.horizon * ns * na];
    let mut state_dist = mdp.initial_dist.clone();
    for h in 0..mdp.horizon {
        let base = h * ns * na;
        for s in 0..ns {
            for (a, &p) in policy.action_probs(h, s).iter().enumerate() {
                d[base + s * na + a] = state_dist[s] * p;
            }
        }
        if h + 1 < mdp.horizon {
            let mut next = vec![T::zero(); ns];
            for s in 0..ns {
                for a in 0..na {
                    let mass = d[base + s * na + a];
                    if mass == T::zero() {
                        continue;
                    }
                    for (n, &p) in next.iter_mut().zip(mdp.transition(h, s, a)) {
                        *n += mass * p;
                    }
                }
            }
            state_dist = next;
        }
    }
    Ok(OccupancyMeasure { n_states: ns, n_actions: na, horizon: mdp.horizon, d })
}

/// `Φ = Σ_{h,s,a} d_h(s,a) f(h,s,a) = E[F(τ)]`.
pub fn expected_features<T: Scalar>(mdp: &TabularMdp<T>, occ: &OccupancyMeasure<T>) -> Matrix<T> {
    let (d1, d2) = mdp.feature_dims();
    let mut phi = Matrix::zeros(d1, d2);
    for (f, &w) in mdp.features.iter().zip(&occ.d) {
        if w != T::zero() {
            phi.axpy(w, f);
        }
    }
    phi
}

/// `reach[h][s]`: whether state `s` at step `h` has positive probability
/// under some policy.
pub fn reachable_states<T: Scalar>(mdp: &TabularMdp<T>) -> Vec<Vec<bool>> {
    let mut reach = vec![mdp.initial_dist.iter().map(|&p| p > T::zero()).collect::<Vec<_>>()];
    for h in 0..mdp.horizon.saturating_sub(1) {
        let mut next = vec![false; mdp.n_states];
        for s in (0..mdp.n_states).filter(|&s| reach[h][s]) {
            for a in 0..mdp.n_actions {
                for (n, &p) in next.iter_mut().zip(mdp.transition(h, s, a)) {
                    *n |= p > T::zero();
                }
            }
        }
        reach.push(next);
    }
    reach
}

/// Orthonormal basis (rows indexed `[h][s][a]`) of the directions along
/// which an occupancy measure can move while staying in the affine hull of
/// the occupancy polytope; `None` if that hull is a single point.
pub fn occupancy_directions<T: Scalar>(mdp: &TabularMdp<T>) -> Result<Option<Matrix<T>>> {
    let (ns, na, horizon) = (mdp.n_states, mdp.n_actions, mdp.horizon);
    let n = horizon * ns * na;
    let idx = |h: usize, s: usize, a: usize| (h * ns + s) * na + a;
    let reach = reachable_states(mdp);
    let mut rows: Vec<Vec<T>> = Vec::new();
    for s in 0..ns {
        let mut row = vec![T::zero(); n];
        for a in 0..na {
            row[idx(0, s, a)] = T::one();
        }
        rows.push(row);
    }
    for h in 0..horizon.saturating_sub(1) {
        for s_next in 0..ns {
            let mut row = vec![T::zero(); n];
            for a in 0..na {
                row[idx(h + 1, s_next, a)] = T::one();
            }
            for s in 0..ns {
                for a in 0..na {
                    row[idx(h, s, a)] -= mdp.transition(h, s, a)[s_next];
                }
            }
            rows.push(row);
        }
    }
    for h in 0..horizon {
        for s in (0..ns).filter(|&s| !reach[h][s]) {
            for a in 0..na {
                let mut row = vec![T::zero(); n];
                row[idx(h, s, a)] = T::one();
                rows.push(row);
            }
        }
    }
    let ct = Matrix::from_fn(n, rows.len(), |i, j| rows[j][i]);
    let sv = crate::linalg::svd(&ct)?;
    let tol = T::of(1e-10) * sv.singular_values[0].max(T::one());
    let rank = sv.singular_values.iter().filter(|&&x| x > tol).count();
    if rank >= n {
        return Ok(None);
    }
    Ok(Some(crate::linalg::orthonormal_complement(&sv.left_vectors.column_block(0, rank))?))
}

/// Backward induction for the reward table. Returns a deterministic optimal
/// policy (ties broken toward the lowest action index) and its value.
pub fn best_response_dp<T: Scalar>(mdp: &TabularMdp<T>, rewards: &RewardTable<T>) -> (MarkovPolicy<T>, T) {
    let (ns, na, horizon) = (mdp.n_states, mdp.n_actions, mdp.horizon);
    let mut value_next = vec![T::zero(); ns];
    let mut probs = vec![T::zero(); horizon * ns * na];
    for h in (0..horizon).rev() {
        let mut value = vec![T::zero(); ns];
        for s in 0..ns {
            let mut best = (0, T::neg_infinity());
            for a in 0..na {
                let mut q = rewards.get(h, s, a);
                if h + 1 < horizon {
                    q += mdp.transition(h, s, a).iter().zip(&value_next).map(|(&p, &v)| p * v).sum::<T>();
                }
                if q > best.1 {
                    best = (a, q);
                }
            }
            value[s] = best.1;
            probs[(h * ns + s) * na + best.0] = T::one();
        }
        value_next = value;
    }
    let total = mdp.initial_dist.iter().zip(&value_next).map(|(&p, &v)| p * v).sum();
    (MarkovPolicy { n_states: ns, n_actions: na, horizon, probs }, total)
}

/// Every deterministic Markov policy exactly once.
pub fn enumerate_policies<T: Scalar>(mdp: &TabularMdp<T>, cap: u128) -> Result<Vec<MarkovPolicy<T>>> {
    let count = mdp.n_deterministic_policies();
    if count > cap {
        return Err(Error::TooLarge { what: "deterministic policy set", size: count, cap });
    }
    let slots = mdp.horizon * mdp.n_states;
    let mut out = Vec::with_capacity(count as usize);
    let mut digits = vec![0usize; slots];
    for _ in 0..count {
        let mut probs = vec![T::zero(); slots * mdp.n_actions];
        for (slot, &a) in digits.iter().enumerate() {
            probs[slot * mdp.n_actions + a] = T::one();
        }
        out.push(MarkovPolicy { n_states: mdp.n_states, n_actions: mdp.n_actions, horizon: mdp.horizon, probs });
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < mdp.n_actions {
                break;
            }
            *d = 0;
        }
    }
    Ok(out)
}

/// All trajectories with positive probability under `policy`, with their
/// probabilities.
pub fn trajectory_distribution<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &MarkovPolicy<T>,
    cap: u128,
) -> Result<Vec<(Trajectory, T)>> {
    policy.check_against(mdp)?;
    let count = mdp.n_trajectories();
    if count > cap {
        return Err(Error::TooLarge { what: "trajectory space", size: count, cap });
    }
    let mut out = Vec::new();
    let mut steps = Vec::with_capacity(mdp.horizon);
    for s in 0..mdp.n_states {
        let p = mdp.initial_dist[s];
        if p > T::zero() {
            expand(mdp, policy, 0, s, p, &mut steps, &mut out);
        }
    }
    Ok(out)
}

fn expand<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &MarkovPolicy<T>,
    h: usize,
    s: usize,
    prob: T,
    steps: &mut Vec<(usize, usize)>,
    out: &mut Vec<(Trajectory, T)>,
) {
    for (a, &pa) in policy.action_probs(h, s).iter().enumerate() {
        if pa == T::zero() {
            continue;
        }
        steps.push((s, a));
        let p = prob * pa;
        if h + 1 == mdp.horizon {
            out.push((Trajectory { steps: steps.clone() }, p));
        } else {
            for (s_next, &pt) in mdp.transition(h, s, a).iter().enumerate() {
                if pt > T::zero() {
                    expand(mdp, policy, h + 1, s_next, p * pt, steps, out);
                }
            }
        }
        steps.pop();
    }
}

pub fn sample_trajectory<T: Scalar, R: Rng + ?Sized>(mdp: &TabularMdp<T>, policy: &MarkovPolicy<T>, rng: &mut R) -> Trajectory {
    let mut steps = Vec::with_capacity(mdp.horizon);
    let mut s = categorical(rng, &mdp.initial_dist);
    for h in 0..mdp.horizon {
        let a = categorical(rng, policy.action_probs(h, s));
        steps.push((s, a));
        if h + 1 < mdp.horizon {
            s = categorical(rng, mdp.transition(h, s, a));
        }
    }
    Trajectory { steps }
}

/// How [`policy_value`] obtained its number.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMethod {
    /// Closed form through the occupancy measure.
    Exact,
    /// Exhaustive trajectory enumeration.
    Enumeration,
    MonteCarlo { samples: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueEstimate<T> {
    pub value: T,
    /// Zero for exact methods.
    pub std_error: T,
    pub method: EvalMethod,
}

/// Evaluation budget for nonlinear reward heads.
pub struct EvalOptions<'a> {
    pub trajectory_cap: u128,
    /// Sample count and stream for the Monte-Carlo fallback.
    pub monte_carlo: Option<(usize, &'a mut Stream)>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self { trajectory_cap: DEFAULT_TRAJECTORY_CAP, monte_carlo: None }
    }
}

/// `J(π; r_θ) = E_{τ∼π}[r_θ(τ)]`.
pub fn policy_value<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &MarkovPolicy<T>,
    theta: &Matrix<T>,
    head: &RewardHead<T>,
    opts: EvalOptions<'_>,
) -> Result<ValueEstimate<T>> {
    if theta.shape() != mdp.feature_dims() {
        return Err(Error::dims(format!("θ is {:?}, features are {:?}", theta.shape(), mdp.feature_dims())));
    }
    if head.is_linear() {
        let occ = occupancy(mdp, policy)?;
        let value = theta.inner(&expected_features(mdp, &occ));
        return Ok(ValueEstimate { value, std_error: T::zero(), method: EvalMethod::Exact });
    }
    if mdp.n_trajectories() <= opts.trajectory_cap {
        let mut value = T::zero();
        for (tau, p) in trajectory_distribution(mdp, policy, opts.trajectory_cap)? {
            value += p * head.apply(theta.inner(&trajectory_features(mdp, &tau)?));
        }
        return Ok(ValueEstimate { value, std_error: T::zero(), method: EvalMethod::Enumeration });
    }
    let Some((samples, rng)) = opts.monte_carlo.filter(|(n, _)| *n >= 2) else {
        return Err(Error::Unsupported(format!(
            "nonlinear head over {} trajectories (cap {}) needs a Monte-Carlo budget",
            mdp.n_trajectories(),
            opts.trajectory_cap
        )));
    };
    let (mut sum, mut sum_sq) = (T::zero(), T::zero());
    for _ in 0..samples {
        let tau = sample_trajectory(mdp, policy, rng);
        let r = head.apply(theta.inner(&trajectory_features(mdp, &tau)?));
        sum += r;
        sum_sq += r * r;
    }
    let n = T::of(samples as f64);
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - T::one())).max(T::zero());
    Ok(ValueEstimate { value: mean, std_error: (var / n).sqrt(), method: EvalMethod::MonteCarlo { samples } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny(seed: u64) -> TabularMdp<f64> {
        make_random_mdp(3, 2, 2, (2, 3), 1.0, &mut stream(seed, "mdp", 0, 0)).unwrap()
    }

    /// Two-state chain with deterministic moves; feature f(h,s,a) = (h+1)(s+1) + a in entry (0,0).
    fn chain() -> TabularMdp<f64> {
        let horizon = 2;
        let mut transitions = Vec::new();
        let mut features = Vec::new();
        for h in 0..horizon {
            for s in 0..2 {
                for a in 0..2 {
                    // action a moves to state a
                    transitions.extend(if a == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
                    features.push(Matrix::from_diagonal(1, 1, &[((h + 1) * (s + 1) + a) as f64]));
                }
            }
        }
        TabularMdp::new(2, 2, horizon, vec![1.0, 0.0], transitions, features).unwrap()
    }

    #[test]
    fn trivial_mdp() {
        let mdp = make_random_mdp::<f64, _>(1, 1, 1, (1, 1), 1.0, &mut stream(0, "m", 0, 0)).unwrap();
        assert_eq!(mdp.transition(0, 0, 0), &[1.0]);
        assert_eq!(mdp.initial_dist(), &[1.0]);
    }

    #[test]
    fn random_mdp_is_deterministic_and_scaled() {
        assert_eq!(tiny(7), tiny(7));
        let mdp = tiny(8);
        let recomputed = mdp.features().iter().map(|f| f.frobenius()).fold(0.0, f64::max);
        assert!((recomputed - 1.0).abs() < 1e-8);
        assert!((mdp.feature_bound() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_rows() {
        let f = vec![Matrix::zeros(1, 1)];
        assert!(TabularMdp::new(1, 1, 1, vec![1.0], vec![0.9], f.clone()).is_err());
        assert!(TabularMdp::new(1, 1, 1, vec![0.5], vec![1.0], f.clone()).is_err());
        assert!(TabularMdp::new(1, 1, 1, vec![1.0], vec![1.0], f).is_ok());
    }

    #[test]
    fn trajectory_features_sum_steps() {
        let mdp = chain();
        let tau = Trajectory { steps: vec![(0, 1), (1, 0)] };
        // f(0,0,1) = 2, f(1,1,0) = 4
        assert_eq!(trajectory_features(&mdp, &tau).unwrap()[(0, 0)], 6.0);
        assert!(trajectory_features(&mdp, &Trajectory { steps: vec![(0, 0)] }).is_err());
        assert!(trajectory_features(&mdp, &Trajectory { steps: vec![(0, 0), (2, 0)] }).is_err());
        let one = make_random_mdp::<f64, _>(2, 2, 1, (2, 2), 1.0, &mut stream(1, "m", 0, 0)).unwrap();
        let f = trajectory_features(&one, &Trajectory { steps: vec![(1, 0)] }).unwrap();
        assert_eq!(&f, one.feature(0, 1, 0));
    }

    #[test]
    fn occupancy_of_simple_policies() {
        let single = TabularMdp::new(1, 2, 1, vec![1.0], vec![1.0, 1.0], vec![Matrix::zeros(1, 1); 2]).unwrap();
        let occ = occupancy(&single, &MarkovPolicy::uniform(&single)).unwrap();
        assert_eq!(occ.as_slice(), &[0.5, 0.5]);

        let mdp = chain();
        let pol = MarkovPolicy::deterministic(&mdp, &[vec![1, 1], vec![0, 0]]).unwrap();
        let occ = occupancy(&mdp, &pol).unwrap();
        assert_eq!(occ.get(0, 0, 1), 1.0);
        assert_eq!(occ.get(1, 1, 0), 1.0);
        assert_eq!(occ.as_slice().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn occupancy_conserves_flow() {
        let mdp = make_random_mdp::<f64, _>(4, 3, 4, (2, 2), 1.0, &mut stream(3, "m", 0, 0)).unwrap();
        let pol = MarkovPolicy::random(&mdp, &mut stream(3, "p", 0, 0));
        let occ = occupancy(&mdp, &pol).unwrap();
        assert!(occ.conservation_defect(&mdp) < 1e-12);
    }

    #[test]
    fn expected_features_match_enumeration() {
        let mdp = tiny(11);
        let pol = MarkovPolicy::random(&mdp, &mut stream(11, "p", 0, 0));
        let phi = expected_features(&mdp, &occupancy(&mdp, &pol).unwrap());
        let mut oracle = Matrix::zeros(2, 3);
        let dist = trajectory_distribution(&mdp, &pol, DEFAULT_TRAJECTORY_CAP).unwrap();
        assert!((dist.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12);
        for (tau, p) in dist {
            oracle.axpy(p, &trajectory_features(&mdp, &tau).unwrap());
        }
        assert!(phi.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn deterministic_support_equals_its_trajectory() {
        let mdp = chain();
        let pol = MarkovPolicy::deterministic(&mdp, &[vec![0, 1], vec![1, 1]]).unwrap();
        let phi = expected_features(&mdp, &occupancy(&mdp, &pol).unwrap());
        let f = trajectory_features(&mdp, &Trajectory { steps: vec![(0, 0), (0, 1)] }).unwrap();
        assert_eq!(phi, f);
    }

    #[test]
    fn policy_value_linear_cases() {
        let mdp = tiny(12);
        let pol = MarkovPolicy::random(&mdp, &mut stream(12, "p", 0, 0));
        let zero = Matrix::zeros(2, 3);
        let v = policy_value(&mdp, &pol, &zero, &RewardHead::Linear, EvalOptions::default()).unwrap();
        assert_eq!(v.value, 0.0);

        let theta = Matrix::from_fn(2, 3, |i, j| (i as f64) - 0.3 * j as f64);
        let v = policy_value(&mdp, &pol, &theta, &RewardHead::Linear, EvalOptions::default()).unwrap();
        let oracle: f64 = trajectory_distribution(&mdp, &pol, DEFAULT_TRAJECTORY_CAP)
            .unwrap()
            .iter()
            .map(|(tau, p)| p * theta.inner(&trajectory_features(&mdp, tau).unwrap()))
            .sum();
        assert!((v.value - oracle).abs() < 1e-10);
        assert_eq!(v.method, EvalMethod::Exact);
    }

    #[test]
    fn policy_value_nonlinear_paths() {
        let mdp = tiny(13);
        let pol = MarkovPolicy::uniform(&mdp);
        let theta = Matrix::from_fn(2, 3, |i, j| 2.0 * i as f64 - j as f64);
        let head = RewardHead::Tanh { range: 1.5 };
        let exact = policy_value(&mdp, &pol, &theta, &head, EvalOptions::default()).unwrap();
        assert_eq!(exact.method, EvalMethod::Enumeration);

        let capped = EvalOptions { trajectory_cap: 4, monte_carlo: None };
        assert!(matches!(policy_value(&mdp, &pol, &theta, &head, capped), Err(Error::Unsupported(_))));

        let mut rng = stream(13, "mc", 0, 0);
        let mc = EvalOptions { trajectory_cap: 4, monte_carlo: Some((20_000, &mut rng)) };
        let est = policy_value(&mdp, &pol, &theta, &head, mc).unwrap();
        assert!(est.std_error > 0.0);
        assert!((est.value - exact.value).abs() < 4.0 * est.std_error);
    }

    #[test]
    fn dp_matches_policy_enumeration() {
        let mdp = tiny(14);
        let rewards = RewardTable::from_fn(&mdp, |h, s, a| ((h * 7 + s * 3 + a * 5) % 11) as f64 / 11.0 - 0.4);
        let (policy, value) = best_response_dp(&mdp, &rewards);
        assert!(policy.is_deterministic());
        let policies = enumerate_policies(&mdp, DEFAULT_POLICY_CAP).unwrap();
        assert_eq!(policies.len(), 64);
        let best = policies
            .iter()
            .map(|p| rewards.expectation(&occupancy(&mdp, p).unwrap()))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((best - value).abs() < 1e-12);
        assert!((rewards.expectation(&occupancy(&mdp, &policy).unwrap()) - value).abs() < 1e-12);
    }

    #[test]
    fn dp_single_step_is_greedy() {
        let mdp = make_random_mdp::<f64, _>(3, 3, 1, (1, 1), 1.0, &mut stream(2, "m", 0, 0)).unwrap();
        let rewards = RewardTable::from_fn(&mdp, |_, s, a| if a == (s + 1) % 3 { 1.0 } else { 0.0 });
        let (policy, value) = best_response_dp(&mdp, &rewards);
        for s in 0..3 {
            assert_eq!(policy.action_probs(0, s)[(s + 1) % 3], 1.0);
        }
        assert!((value - 1.0).abs() < 1e-15);
        let (_, zero) = best_response_dp(&mdp, &RewardTable::from_fn(&mdp, |_, _, _| 0.0));
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn policy_enumeration_counts_and_validity() {
        let one = make_random_mdp::<f64, _>(1, 2, 1, (1, 1), 1.0, &mut stream(0, "m", 0, 0)).unwrap();
        assert_eq!(enumerate_policies(&one, DEFAULT_POLICY_CAP).unwrap().len(), 2);
        let mdp = tiny(15);
        let all = enumerate_policies(&mdp, DEFAULT_POLICY_CAP).unwrap();
        let unique: std::collections::HashSet<Vec<u64>> =
            all.iter().map(|p| p.as_slice().iter().map(|x| x.to_bits()).collect()).collect();
        assert_eq!(unique.len(), 64);
        for p in &all {
            assert!(p.is_deterministic());
            MarkovPolicy::new(3, 2, 2, p.as_slice().to_vec()).unwrap();
        }
        assert!(matches!(enumerate_policies(&mdp, 63), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn to_policy_recovers_visited_states() {
        let mdp = tiny(16);
        let pol = MarkovPolicy::random(&mdp, &mut stream(16, "p", 0, 0));
        let back = occupancy(&mdp, &pol).unwrap().to_policy();
        for (a, b) in back.as_slice().iter().zip(pol.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
