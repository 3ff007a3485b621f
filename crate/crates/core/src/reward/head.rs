use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Link from the Frobenius score `z = ⟨Θ, F⟩_F` to a trajectory reward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RewardHead<T> {
    Linear,
    /// `R·tanh(z/R)`, bounded in `(−R, R)`.
    Tanh { range: T },
}

impl<T: Scalar> RewardHead<T> {
    pub fn tanh(range: T) -> Result<Self> {
        if !(range > T::zero()) || !range.is_finite() {
            return Err(Error::invalid(format!("tanh range must be positive and finite, got {range}")));
        }
        Ok(RewardHead::Tanh { range })
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, RewardHead::Linear)
    }

    #[inline]
    pub fn apply(&self, z: T) -> T {
        match *self {
            RewardHead::Linear => z,
            RewardHead::Tanh { range } => range * (z / range).tanh(),
        }
    }

    /// `dh/dz`.
    #[inline]
    pub fn derivative(&self, z: T) -> T {
        match *self {
            RewardHead::Linear => T::one(),
            RewardHead::Tanh { range } => {
                let t = (z / range).tanh();
                T::one() - t * t
            }
        }
    }

    pub fn to_spec(&self) -> HeadSpec {
        match *self {
            RewardHead::Linear => HeadSpec::Linear,
            RewardHead::Tanh { range } => HeadSpec::Tanh { range: range.as_f64() },
        }
    }

    pub fn from_spec(spec: &HeadSpec) -> Result<Self> {
        match *spec {
            HeadSpec::Linear => Ok(RewardHead::Linear),
            HeadSpec::Tanh { range } => Self::tanh(T::of(range)),
        }
    }
}

/// Serializable form of [`RewardHead`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    #[default]
    Linear,
    Tanh {
        range: f64,
    },
}

/// `r_Θ(τ) = h(⟨Θ, F(τ)⟩_F)`.
pub fn reward<T: Scalar>(theta: &Matrix<T>, f: &Matrix<T>, head: &RewardHead<T>) -> Result<T> {
    if theta.shape() != f.shape() {
        return Err(Error::dims(format!("θ is {:?}, F is {:?}", theta.shape(), f.shape())));
    }
    Ok(head.apply(theta.inner(f)))
}

/// Logistic sigmoid, evaluated without overflow.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x) = −log(1 + e^{−x})`, stable for large `|x|`.
#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    -((-x).max(T::zero()) + (-x.abs()).exp().ln_1p())
}
