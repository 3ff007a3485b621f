//! Preference log-likelihood and its exact gradient.

use std::borrow::Borrow;

use rayon::prelude::*;

use super::head::{log_sigmoid, sigmoid, RewardHead};
use super::model::{FactorGradient, RewardModel};
use crate::data::{PreferenceDataset, PreferenceSample};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Log-likelihood of one sample with reward gap `x`.
#[inline]
pub(crate) fn sample_log_prob<T: Scalar>(x: T, label: u8) -> T {
    if label == 1 {
        log_sigmoid(x)
    } else {
        log_sigmoid(-x)
    }
}

/// Log-likelihood of a user's samples under `theta` and, optionally, its
/// gradient with respect to `theta`. Accumulates in sample order.
pub(crate) fn user_objective<T: Scalar, S: Borrow<PreferenceSample<T>>>(
    theta: &Matrix<T>,
    head: &RewardHead<T>,
    samples: &[S],
    with_grad: bool,
) -> (T, Option<Matrix<T>>) {
    let mut ll = T::zero();
    let mut grad = with_grad.then(|| Matrix::zeros(theta.rows(), theta.cols()));
    for s in samples {
        let s = s.borrow();
        let label_one = T::of(f64::from(s.label));
        match head {
            RewardHead::Linear => {
                let x = theta.inner(&s.diff);
                ll += sample_log_prob(x, s.label);
                if let Some(g) = grad.as_mut() {
                    g.axpy(label_one - sigmoid(x), &s.diff);
                }
            }
            RewardHead::Tanh { .. } => {
                let (z0, z1) = (theta.inner(&s.f0), theta.inner(&s.f1));
                let x = head.apply(z0) - head.apply(z1);
                ll += sample_log_prob(x, s.label);
                if let Some(g) = grad.as_mut() {
                    let residual = label_one - sigmoid(x);
                    g.axpy(residual * head.derivative(z0), &s.f0);
                    g.axpy(-residual * head.derivative(z1), &s.f1);
                }
            }
        }
    }
    (ll, grad)
}

/// Objective over per-user sample groups and per-user `∂/∂Θᵢ`. Users are
/// processed in parallel and reduced in user order.
pub(crate) fn evaluate_groups<T, M, S>(model: &M, groups: &[Vec<S>], with_grad: bool) -> (T, Vec<Matrix<T>>)
where
    T: Scalar,
    M: RewardModel<T>,
    S: Borrow<PreferenceSample<T>> + Sync,
{
    let (d1, d2) = model.dims();
    let parts: Vec<(T, Option<Matrix<T>>)> = groups
        .par_iter()
        .enumerate()
        .map(|(user, samples)| {
            if samples.is_empty() {
                return (T::zero(), with_grad.then(|| Matrix::zeros(d1, d2)));
            }
            user_objective(&model.theta(user), model.head(), samples, with_grad)
        })
        .collect();
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(if with_grad { parts.len() } else { 0 });
    for (ll, g) in parts {
        total += ll;
        grads.extend(g);
    }
    (total, grads)
}

fn check_fit<T: Scalar, M: RewardModel<T>>(model: &M, ds: &PreferenceDataset<T>) -> Result<()> {
    if ds.dims() != model.dims() {
        return Err(Error::dims(format!("dataset features {:?} vs model {:?}", ds.dims(), model.dims())));
    }
    if ds.n_users() != model.n_users() {
        return Err(Error::dims(format!("dataset has {} users, model has {}", ds.n_users(), model.n_users())));
    }
    Ok(())
}

/// `Σᵢ Σⱼ log P_{Θᵢ}(oᵢⱼ | τᵢⱼ₀, τᵢⱼ₁)`.
pub fn log_likelihood<T: Scalar, M: RewardModel<T>>(model: &M, ds: &PreferenceDataset<T>) -> Result<T> {
    check_fit(model, ds)?;
    Ok(evaluate_groups(model, ds.per_user(), false).0)
}

/// Per-user gradients `∂F/∂Θᵢ`.
pub fn theta_gradients<T: Scalar, M: RewardModel<T>>(model: &M, ds: &PreferenceDataset<T>) -> Result<Vec<Matrix<T>>> {
    check_fit(model, ds)?;
    Ok(evaluate_groups(model, ds.per_user(), true).1)
}

/// Gradient with respect to the model's factors.
pub fn grad_log_likelihood<T: Scalar, M: RewardModel<T>>(model: &M, ds: &PreferenceDataset<T>) -> Result<FactorGradient<T>> {
    Ok(model.chain_gradient(&theta_gradients(model, ds)?))
}

/// `σ(r_{Θᵢ}(τ₀) − r_{Θᵢ}(τ₁))`.
pub fn pref_prob<T: Scalar, M: RewardModel<T>>(model: &M, user: usize, f0: &Matrix<T>, f1: &Matrix<T>) -> Result<T> {
    if user >= model.n_users() {
        return Err(Error::invalid(format!("user {user} out of range (N = {})", model.n_users())));
    }
    if f0.shape() != model.dims() || f1.shape() != model.dims() {
        return Err(Error::dims("feature matrices do not match the model"));
    }
    let theta = model.theta(user);
    let head = model.head();
    Ok(sigmoid(head.apply(theta.inner(f0)) - head.apply(theta.inner(f1))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::{BaselineKind, BaselineModel, SharedLoraModel, ShareMode};

    fn one_sample(f0: Matrix<f64>, f1: Matrix<f64>, label: u8) -> PreferenceDataset<f64> {
        let (d1, d2) = f0.shape();
        PreferenceDataset::new(d1, d2, vec![vec![PreferenceSample::new(0, f0, f1, label).unwrap()]]).unwrap()
    }

    fn model(d1: usize, d2: usize, head: RewardHead<f64>) -> SharedLoraModel<f64> {
        SharedLoraModel::init(Matrix::zeros(d1, d2), ShareMode::ShareLeft, 1, 1, 10.0, head, 0).unwrap()
    }

    #[test]
    fn zero_gap_sample() {
        let ds = one_sample(Matrix::zeros(2, 2), Matrix::zeros(2, 2), 1);
        let ll = log_likelihood(&model(2, 2, RewardHead::Linear), &ds).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);
        let empty = PreferenceDataset::<f64>::new(2, 2, vec![vec![]]).unwrap();
        assert_eq!(log_likelihood(&model(2, 2, RewardHead::Linear), &empty).unwrap(), 0.0);
    }

    #[test]
    fn extreme_gaps_stay_finite() {
        let mut m = model(1, 1, RewardHead::Linear);
        m.user_factors[0] = Matrix::from_diagonal(1, 1, &[1000.0 / m.shared_factor[(0, 0)]]);
        let ds_right = one_sample(Matrix::from_diagonal(1, 1, &[1.0]), Matrix::zeros(1, 1), 1);
        let ds_wrong = one_sample(Matrix::from_diagonal(1, 1, &[1.0]), Matrix::zeros(1, 1), 0);
        let right = log_likelihood(&m, &ds_right).unwrap();
        let wrong = log_likelihood(&m, &ds_wrong).unwrap();
        assert!(right.abs() < 1e-12);
        assert!((wrong + 1000.0).abs() < 1e-9);
        let g = grad_log_likelihood(&m, &ds_right).unwrap();
        assert!(g.norm() < 1e-6);
    }

    #[test]
    fn zero_features_give_zero_gradient() {
        let ds = one_sample(Matrix::zeros(3, 2), Matrix::zeros(3, 2), 0);
        for head in [RewardHead::Linear, RewardHead::Tanh { range: 2.0 }] {
            let g = grad_log_likelihood(&model(3, 2, head), &ds).unwrap();
            assert_eq!(g.norm(), 0.0);
        }
    }

    #[test]
    fn pref_prob_properties() {
        let m = BaselineModel::new(
            Matrix::from_diagonal(1, 1, &[3f64.ln()]),
            1,
            1.0,
            RewardHead::Linear,
            crate::reward::BaselineParams::Full { deltas: vec![Matrix::zeros(1, 1)] },
        )
        .unwrap();
        let one = Matrix::from_diagonal(1, 1, &[1.0]);
        let zero = Matrix::zeros(1, 1);
        assert!((pref_prob(&m, 0, &one, &zero).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(pref_prob(&m, 0, &one, &one).unwrap(), 0.5);
        let p = pref_prob(&m, 0, &one, &zero).unwrap() + pref_prob(&m, 0, &zero, &one).unwrap();
        assert!((p - 1.0).abs() <= 1e-15);
        assert!(pref_prob(&m, 1, &one, &zero).is_err());
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let ds = one_sample(Matrix::zeros(2, 2), Matrix::zeros(2, 2), 1);
        assert!(log_likelihood(&model(3, 2, RewardHead::Linear), &ds).is_err());
        let two = BaselineModel::<f64>::init(BaselineKind::FullParam, Matrix::zeros(2, 2), 1, 2, 1.0, RewardHead::Linear, 0).unwrap();
        assert!(log_likelihood(&two, &ds).is_err());
    }
}
