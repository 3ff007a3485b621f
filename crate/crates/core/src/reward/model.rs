use serde::{Deserialize, Serialize};

use super::head::RewardHead;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{gaussian, stream};
use crate::scalar::Scalar;

/// Which factor of `ΔΘᵢ` is common to all users.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareMode {
    /// `ΔΘᵢ = B·Wᵢ` with `B` (`d₁×k`) shared.
    ShareLeft,
    /// `ΔΘᵢ = Aᵢ·W` with `W` (`k×d₂`) shared.
    ShareRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// One rank-k pair for every user.
    LoraGlobal,
    /// Independent rank-k pair per user.
    LoraLocal,
    /// Unconstrained `d₁×d₂` update per user.
    FullParam,
}

/// Gradient of the objective arranged like the model's factors: common
/// factors first, then each user's factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGradient<T> {
    pub shared: Vec<Matrix<T>>,
    pub users: Vec<Vec<Matrix<T>>>,
}

impl<T: Scalar> FactorGradient<T> {
    pub fn flatten(&self) -> Vec<T> {
        self.shared
            .iter()
            .chain(self.users.iter().flatten())
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn norm(&self) -> T {
        self.shared.iter().chain(self.users.iter().flatten()).map(Matrix::frobenius_sq).sum::<T>().sqrt()
    }
}

/// Common interface of every reward parameterization. Parameters are the
/// concatenation of [`RewardModel::factors`] in order, each row-major.
pub trait RewardModel<T: Scalar>: Clone + Send + Sync {
    fn n_users(&self) -> usize;
    fn head(&self) -> &RewardHead<T>;
    fn theta_init(&self) -> &Matrix<T>;
    fn frob_bound(&self) -> T;
    fn delta_theta(&self, user: usize) -> Matrix<T>;

    /// Common factors, then per-user factors in user order.
    fn factors(&self) -> Vec<&Matrix<T>>;
    fn factors_mut(&mut self) -> Vec<&mut Matrix<T>>;
    /// Owning user of each factor (`None` for common factors).
    fn factor_owners(&self) -> Vec<Option<usize>>;

    /// Chains per-user `∂/∂Θᵢ` blocks to the factors.
    fn chain_gradient(&self, theta_grads: &[Matrix<T>]) -> FactorGradient<T>;

    /// Rescales each user's update onto the ball `‖ΔΘᵢ‖_F ≤ B`.
    fn project(&mut self);

    fn dims(&self) -> (usize, usize) {
        self.theta_init().shape()
    }

    fn theta(&self, user: usize) -> Matrix<T> {
        self.theta_init() + &self.delta_theta(user)
    }

    fn num_params(&self) -> usize {
        self.factors().iter().map(|m| m.as_slice().len()).sum()
    }

    fn params(&self) -> Vec<T> {
        self.factors().iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    fn set_params(&mut self, p: &[T]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::dims(format!("expected {} parameters, got {}", self.num_params(), p.len())));
        }
        let mut offset = 0;
        for m in self.factors_mut() {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&p[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `[ΔΘ₁, …, ΔΘ_N]`, a `d₁×(N·d₂)` matrix.
    fn assemble_delta_theta(&self) -> Matrix<T> {
        let blocks: Vec<Matrix<T>> = (0..self.n_users()).map(|i| self.delta_theta(i)).collect();
        Matrix::hcat(&blocks).expect("user updates share a shape")
    }

    fn is_feasible(&self) -> bool {
        (0..self.n_users()).all(|i| self.delta_theta(i).frobenius() <= self.frob_bound())
    }
}

fn validate_common<T: Scalar>(theta_init: &Matrix<T>, frob_bound: T, n_users: usize) -> Result<()> {
    if n_users == 0 {
        return Err(Error::invalid("at least one user is required"));
    }
    if !(frob_bound > T::zero()) || !frob_bound.is_finite() {
        return Err(Error::invalid(format!("frob_bound must be positive and finite, got {frob_bound}")));
    }
    if !theta_init.is_finite() {
        return Err(Error::invalid("theta_init has non-finite entries"));
    }
    Ok(())
}

/// Scales `factor` until `norm_of(factor) ≤ bound` holds in floating point,
/// starting from the exact ratio.
fn shrink_onto_ball<T: Scalar>(factor: &mut Matrix<T>, bound: T, norm_of: impl Fn(&Matrix<T>) -> T) {
    let norm = norm_of(factor);
    if norm <= bound {
        return;
    }
    factor.scale_mut(bound / norm);
    let nudge = T::one() - T::of(2.0) * T::epsilon();
    while norm_of(factor) > bound {
        factor.scale_mut(nudge);
    }
}

/// Personalized model with one factor shared across users.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedLoraModel<T> {
    pub(crate) theta_init: Matrix<T>,
    pub(crate) share_mode: ShareMode,
    pub(crate) shared_factor: Matrix<T>,
    pub(crate) user_factors: Vec<Matrix<T>>,
    pub(crate) frob_bound: T,
    pub(crate) head: RewardHead<T>,
}

impl<T: Scalar> SharedLoraModel<T> {
    pub fn new(
        theta_init: Matrix<T>,
        share_mode: ShareMode,
        shared_factor: Matrix<T>,
        user_factors: Vec<Matrix<T>>,
        frob_bound: T,
        head: RewardHead<T>,
    ) -> Result<Self> {
        validate_common(&theta_init, frob_bound, user_factors.len())?;
        let (d1, d2) = theta_init.shape();
        let (shared_shape, user_shape) = match share_mode {
            ShareMode::ShareLeft => {
                let k = shared_factor.cols();
                ((d1, k), (k, d2))
            }
            ShareMode::ShareRight => {
                let k = shared_factor.rows();
                ((k, d2), (d1, k))
            }
        };
        if shared_factor.shape() != shared_shape || shared_shape.0 * shared_shape.1 == 0 {
            return Err(Error::dims(format!("shared factor {:?} does not fit θ_init {:?}", shared_factor.shape(), (d1, d2))));
        }
        if let Some(bad) = user_factors.iter().position(|u| u.shape() != user_shape) {
            return Err(Error::dims(format!("user factor {bad} is {:?}, expected {user_shape:?}", user_factors[bad].shape())));
        }
        if !shared_factor.is_finite() || user_factors.iter().any(|u| !u.is_finite()) {
            return Err(Error::invalid("factors have non-finite entries"));
        }
        Ok(Self { theta_init, share_mode, shared_factor, user_factors, frob_bound, head })
    }

    /// Gaussian shared factor (std `1/√d₁` for share-left, `1/√d₂` for
    /// share-right) from stream `(seed, "init-factor", 0, 0)`, zero user factors.
    pub fn init(
        theta_init: Matrix<T>,
        share_mode: ShareMode,
        k: usize,
        n_users: usize,
        frob_bound: T,
        head: RewardHead<T>,
        seed: u64,
    ) -> Result<Self> {
        let (d1, d2) = theta_init.shape();
        if k == 0 || k > d1.min(d2 * n_users.max(1)) {
            return Err(Error::invalid(format!("rank k = {k} is not supported for d1 = {d1}, d2 = {d2}")));
        }
        let mut rng = stream(seed, "init-factor", 0, 0);
        let (shared, user_shape) = match share_mode {
            ShareMode::ShareLeft => {
                let std = T::one() / T::of(d1 as f64).sqrt();
                (Matrix::from_fn(d1, k, |_, _| std * gaussian::<T, _>(&mut rng)), (k, d2))
            }
            ShareMode::ShareRight => {
                let std = T::one() / T::of(d2 as f64).sqrt();
                (Matrix::from_fn(k, d2, |_, _| std * gaussian::<T, _>(&mut rng)), (d1, k))
            }
        };
        let users = vec![Matrix::zeros(user_shape.0, user_shape.1); n_users];
        Self::new(theta_init, share_mode, shared, users, frob_bound, head)
    }

    pub fn share_mode(&self) -> ShareMode {
        self.share_mode
    }

    pub fn rank(&self) -> usize {
        match self.share_mode {
            ShareMode::ShareLeft => self.shared_factor.cols(),
            ShareMode::ShareRight => self.shared_factor.rows(),
        }
    }

    pub fn shared_factor(&self) -> &Matrix<T> {
        &self.shared_factor
    }

    pub fn user_factors(&self) -> &[Matrix<T>] {
        &self.user_factors
    }

    pub fn with_head(mut self, head: RewardHead<T>) -> Self {
        self.head = head;
        self
    }

    /// Structured gradient: `grad_shared` and one block per user.
    pub fn split_gradient(g: &FactorGradient<T>) -> (&Matrix<T>, Vec<&Matrix<T>>) {
        (&g.shared[0], g.users.iter().map(|u| &u[0]).collect())
    }
}

impl<T: Scalar> RewardModel<T> for SharedLoraModel<T> {
    fn n_users(&self) -> usize {
        self.user_factors.len()
    }

    fn head(&self) -> &RewardHead<T> {
        &self.head
    }

    fn theta_init(&self) -> &Matrix<T> {
        &self.theta_init
    }

    fn frob_bound(&self) -> T {
        self.frob_bound
    }

    fn delta_theta(&self, user: usize) -> Matrix<T> {
        match self.share_mode {
            ShareMode::ShareLeft => self.shared_factor.matmul(&self.user_factors[user]),
            ShareMode::ShareRight => self.user_factors[user].matmul(&self.shared_factor),
        }
    }

    fn factors(&self) -> Vec<&Matrix<T>> {
        std::iter::once(&self.shared_factor).chain(&self.user_factors).collect()
    }

    fn factors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        std::iter::once(&mut self.shared_factor).chain(self.user_factors.iter_mut()).collect()
    }

    fn factor_owners(&self) -> Vec<Option<usize>> {
        std::iter::once(None).chain((0..self.user_factors.len()).map(Some)).collect()
    }

    fn chain_gradient(&self, theta_grads: &[Matrix<T>]) -> FactorGradient<T> {
        assert_eq!(theta_grads.len(), self.n_users(), "one Θ-gradient per user");
        let mut shared = Matrix::zeros(self.shared_factor.rows(), self.shared_factor.cols());
        let mut users = Vec::with_capacity(self.n_users());
        for (g, u) in theta_grads.iter().zip(&self.user_factors) {
            match self.share_mode {
                ShareMode::ShareLeft => {
                    shared.axpy(T::one(), &g.matmul_t(u));
                    users.push(vec![self.shared_factor.t_matmul(g)]);
                }
                ShareMode::ShareRight => {
                    shared.axpy(T::one(), &u.t_matmul(g));
                    users.push(vec![g.matmul_t(&self.shared_factor)]);
                }
            }
        }
        FactorGradient { shared: vec![shared], users }
    }

    fn project(&mut self) {
        let bound = self.frob_bound;
        let shared = &self.shared_factor;
        for u in self.user_factors.iter_mut() {
            match self.share_mode {
                ShareMode::ShareLeft => shrink_onto_ball(u, bound, |w| shared.matmul(w).frobenius()),
                ShareMode::ShareRight => shrink_onto_ball(u, bound, |a| a.matmul(shared).frobenius()),
            }
        }
    }
}

/// Parameters of a baseline model.
#[derive(Clone, Debug, PartialEq)]
pub enum BaselineParams<T> {
    Global { b: Matrix<T>, w: Matrix<T> },
    Local { pairs: Vec<(Matrix<T>, Matrix<T>)> },
    Full { deltas: Vec<Matrix<T>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel<T> {
    pub(crate) theta_init: Matrix<T>,
    pub(crate) n_users: usize,
    pub(crate) frob_bound: T,
    pub(crate) head: RewardHead<T>,
    pub(crate) params: BaselineParams<T>,
}

impl<T: Scalar> BaselineModel<T> {
    pub fn new(
        theta_init: Matrix<T>,
        n_users: usize,
        frob_bound: T,
        head: RewardHead<T>,
        params: BaselineParams<T>,
    ) -> Result<Self> {
        validate_common(&theta_init, frob_bound, n_users)?;
        let (d1, d2) = theta_init.shape();
        let pair_ok = |b: &Matrix<T>, w: &Matrix<T>| b.rows() == d1 && w.cols() == d2 && b.cols() == w.rows() && b.cols() > 0;
        let ok = match &params {
            BaselineParams::Global { b, w } => pair_ok(b, w),
            BaselineParams::Local { pairs } => pairs.len() == n_users && pairs.iter().all(|(b, w)| pair_ok(b, w)),
            BaselineParams::Full { deltas } => deltas.len() == n_users && deltas.iter().all(|d| d.shape() == (d1, d2)),
        };
        if !ok {
            return Err(Error::dims("baseline parameters do not fit θ_init and the user count"));
        }
        Ok(Self { theta_init, n_users, frob_bound, head, params })
    }

    /// Global: `b` Gaussian (std `1/√d₁`) from `(seed, "init-factor", 0, 0)`, `w = 0`.
    /// Local: user `i` uses stream `(seed, "init-factor", 0, i)` the same way.
    /// Full: zero updates.
    pub fn init(
        kind: BaselineKind,
        theta_init: Matrix<T>,
        k: usize,
        n_users: usize,
        frob_bound: T,
        head: RewardHead<T>,
        seed: u64,
    ) -> Result<Self> {
        let (d1, d2) = theta_init.shape();
        if kind != BaselineKind::FullParam && (k == 0 || k > d1.min(d2 * n_users.max(1))) {
            return Err(Error::invalid(format!("rank k = {k} is not supported for d1 = {d1}, d2 = {d2}")));
        }
        let std = T::one() / T::of(d1 as f64).sqrt();
        let pair = |user: u64| {
            let mut rng = stream(seed, "init-factor", 0, user);
            (Matrix::from_fn(d1, k, |_, _| std * gaussian::<T, _>(&mut rng)), Matrix::zeros(k, d2))
        };
        let params = match kind {
            BaselineKind::LoraGlobal => {
                let (b, w) = pair(0);
                BaselineParams::Global { b, w }
            }
            BaselineKind::LoraLocal => BaselineParams::Local { pairs: (0..n_users as u64).map(pair).collect() },
            BaselineKind::FullParam => BaselineParams::Full { deltas: vec![Matrix::zeros(d1, d2); n_users] },
        };
        Self::new(theta_init, n_users, frob_bound, head, params)
    }

    pub fn kind(&self) -> BaselineKind {
        match self.params {
            BaselineParams::Global { .. } => BaselineKind::LoraGlobal,
            BaselineParams::Local { .. } => BaselineKind::LoraLocal,
            BaselineParams::Full { .. } => BaselineKind::FullParam,
        }
    }

    pub fn params_ref(&self) -> &BaselineParams<T> {
        &self.params
    }

    pub fn with_head(mut self, head: RewardHead<T>) -> Self {
        self.head = head;
        self
    }
}

impl<T: Scalar> RewardModel<T> for BaselineModel<T> {
    fn n_users(&self) -> usize {
        self.n_users
    }

    fn head(&self) -> &RewardHead<T> {
        &self.head
    }

    fn theta_init(&self) -> &Matrix<T> {
        &self.theta_init
    }

    fn frob_bound(&self) -> T {
        self.frob_bound
    }

    fn delta_theta(&self, user: usize) -> Matrix<T> {
        assert!(user < self.n_users, "user {user} out of range");
        match &self.params {
            BaselineParams::Global { b, w } => b.matmul(w),
            BaselineParams::Local { pairs } => pairs[user].0.matmul(&pairs[user].1),
            BaselineParams::Full { deltas } => deltas[user].clone(),
        }
    }

    fn factors(&self) -> Vec<&Matrix<T>> {
        match &self.params {
            BaselineParams::Global { b, w } => vec![b, w],
            BaselineParams::Local { pairs } => pairs.iter().flat_map(|(b, w)| [b, w]).collect(),
            BaselineParams::Full { deltas } => deltas.iter().collect(),
        }
    }

    fn factors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        match &mut self.params {
            BaselineParams::Global { b, w } => vec![b, w],
            BaselineParams::Local { pairs } => pairs.iter_mut().flat_map(|(b, w)| [b, w]).collect(),
            BaselineParams::Full { deltas } => deltas.iter_mut().collect(),
        }
    }

    fn factor_owners(&self) -> Vec<Option<usize>> {
        match &self.params {
            BaselineParams::Global { .. } => vec![None, None],
            BaselineParams::Local { pairs } => (0..pairs.len()).flat_map(|i| [Some(i), Some(i)]).collect(),
            BaselineParams::Full { deltas } => (0..deltas.len()).map(Some).collect(),
        }
    }

    fn chain_gradient(&self, theta_grads: &[Matrix<T>]) -> FactorGradient<T> {
        assert_eq!(theta_grads.len(), self.n_users, "one Θ-gradient per user");
        match &self.params {
            BaselineParams::Global { b, w } => {
                let (d1, d2) = self.theta_init.shape();
                let mut total = Matrix::zeros(d1, d2);
                theta_grads.iter().for_each(|g| total.axpy(T::one(), g));
                FactorGradient { shared: vec![total.matmul_t(w), b.t_matmul(&total)], users: vec![Vec::new(); self.n_users] }
            }
            BaselineParams::Local { pairs } => FactorGradient {
                shared: Vec::new(),
                users: pairs.iter().zip(theta_grads).map(|((b, w), g)| vec![g.matmul_t(w), b.t_matmul(g)]).collect(),
            },
            BaselineParams::Full { .. } => {
                FactorGradient { shared: Vec::new(), users: theta_grads.iter().map(|g| vec![g.clone()]).collect() }
            }
        }
    }

    fn project(&mut self) {
        let bound = self.frob_bound;
        match &mut self.params {
            BaselineParams::Global { b, w } => shrink_onto_ball(w, bound, |w| b.matmul(w).frobenius()),
            BaselineParams::Local { pairs } => {
                for (b, w) in pairs.iter_mut() {
                    shrink_onto_ball(w, bound, |w| b.matmul(w).frobenius());
                }
            }
            BaselineParams::Full { deltas } => {
                for d in deltas.iter_mut() {
                    shrink_onto_ball(d, bound, Matrix::frobenius);
                }
            }
        }
    }
}

/// Rescales over-long user updates (see [`RewardModel::project`]).
pub fn project_frobenius<T: Scalar, M: RewardModel<T>>(model: &M) -> M {
    let mut out = model.clone();
    out.project();
    out
}
