//! Subspace geometry and spectrum tools: rank-k truncation, principal angle
//! distance, task-diversity metrics, and planted-spectrum synthesis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::qr::{haar_columns, qr_full};
use super::svd::svd;
use crate::error::{Error, Result};
use crate::rng::gaussian;
use crate::scalar::Scalar;

/// Optimal rank-k approximation `θ◇ = B◇·W◇` of a matrix.
#[derive(Clone, Debug)]
pub struct RankKApprox<T> {
    pub theta_diamond: Matrix<T>,
    /// Top-k left singular vectors (column-orthonormal).
    pub b_diamond: Matrix<T>,
    /// `Λ_k V_kᵀ`.
    pub w_diamond: Matrix<T>,
}

/// Spectral summary of an aggregated difference matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversitySummary {
    /// `σ_k² / N`.
    pub nu: f64,
    /// `Σ_{i>k} σ_i²`.
    pub tail: f64,
    pub spectrum: Vec<f64>,
    pub k: usize,
    pub n_users: usize,
}

fn ortho_tol<T: Scalar>() -> T {
    T::epsilon().sqrt() * T::of(10.0)
}

/// Largest entry of `|BᵀB − I|`.
pub fn orthonormality_defect<T: Scalar>(b: &Matrix<T>) -> T {
    b.t_matmul(b).max_abs_diff(&Matrix::identity(b.cols()))
}

fn require_orthonormal<T: Scalar>(b: &Matrix<T>, name: &str) -> Result<()> {
    let defect = orthonormality_defect(b);
    if defect > ortho_tol::<T>() {
        return Err(Error::invalid(format!("{name} is not column-orthonormal (|BᵀB − I| = {:e})", defect.as_f64())));
    }
    Ok(())
}

/// Optimal rank-k approximation by truncated SVD.
pub fn optimal_rank_k<T: Scalar>(m: &Matrix<T>, k: usize) -> Result<RankKApprox<T>> {
    let r = m.rows().min(m.cols());
    if k == 0 || k > r {
        return Err(Error::invalid(format!("rank k = {k} outside 1..={r}")));
    }
    let s = svd(m)?;
    let b = s.left_vectors.column_block(0, k);
    let mut w = s.right_vectors.column_block(0, k).transpose();
    for i in 0..k {
        for j in 0..w.cols() {
            w[(i, j)] *= s.singular_values[i];
        }
    }
    Ok(RankKApprox { theta_diamond: b.matmul(&w), b_diamond: b, w_diamond: w })
}

/// Orthonormal basis of `span(b)^⊥`, a `d×(d−k)` matrix.
pub fn orthonormal_complement<T: Scalar>(b: &Matrix<T>) -> Result<Matrix<T>> {
    let (d, k) = b.shape();
    if k >= d {
        return Err(Error::invalid(format!("complement of a {d}x{k} basis is empty")));
    }
    require_orthonormal(b, "basis")?;
    let (q, _) = qr_full(b);
    Ok(q.column_block(k, d - k))
}

/// Principal angle distance `(1/√2)‖B₁B₁ᵀ − B₂B₂ᵀ‖_F` between column spaces.
pub fn principal_angle_dist<T: Scalar>(b1: &Matrix<T>, b2: &Matrix<T>) -> Result<T> {
    if b1.shape() != b2.shape() {
        return Err(Error::invalid(format!("basis shapes {:?} and {:?} differ", b1.shape(), b2.shape())));
    }
    require_orthonormal(b1, "first basis")?;
    require_orthonormal(b2, "second basis")?;
    let diff = &b1.matmul_t(b1) - &b2.matmul_t(b2);
    Ok(diff.frobenius() / T::of(2.0).sqrt())
}

/// The same distance through the complement: `‖B₁ᵀ B̄₂‖_F`.
pub fn principal_angle_dist_via_complement<T: Scalar>(b1: &Matrix<T>, b2: &Matrix<T>) -> Result<T> {
    if b1.shape() != b2.shape() {
        return Err(Error::invalid("basis shapes differ"));
    }
    require_orthonormal(b1, "first basis")?;
    if b2.cols() == b2.rows() {
        return Ok(T::zero());
    }
    let comp = orthonormal_complement(b2)?;
    Ok(b1.t_matmul(&comp).frobenius())
}

/// Condition number `ν = σ_k²/N` and tail energy `Σ_{i>k} σ_i²` of `ΔΘ*`.
pub fn diversity_metrics<T: Scalar>(delta_theta_star: &Matrix<T>, k: usize, n_users: usize) -> Result<DiversitySummary> {
    if n_users == 0 || delta_theta_star.cols() % n_users != 0 {
        return Err(Error::dims(format!("{} columns do not split into {n_users} users", delta_theta_star.cols())));
    }
    let spectrum: Vec<f64> = svd(delta_theta_star)?.singular_values.iter().map(|s| s.as_f64()).collect();
    summarize_spectrum(spectrum, k, n_users)
}

fn summarize_spectrum(spectrum: Vec<f64>, k: usize, n_users: usize) -> Result<DiversitySummary> {
    if k == 0 || k > spectrum.len() {
        return Err(Error::invalid(format!("rank k = {k} outside 1..={}", spectrum.len())));
    }
    let nu = spectrum[k - 1] * spectrum[k - 1] / n_users as f64;
    let tail = spectrum[k..].iter().map(|s| s * s).sum();
    Ok(DiversitySummary { nu, tail, spectrum, k, n_users })
}

/// Random `d₁×(N·d₂)` matrix `U·diag(spectrum)·Vᵀ` with Haar-distributed
/// orthonormal factors.
pub fn generate_planted<T: Scalar, R: Rng + ?Sized>(
    d1: usize,
    d2: usize,
    n_users: usize,
    k: usize,
    spectrum: &[T],
    rng: &mut R,
) -> Result<Matrix<T>> {
    if d1 == 0 || d2 == 0 || n_users == 0 {
        return Err(Error::invalid("dimensions must be positive"));
    }
    let cols = n_users * d2;
    let max_rank = d1.min(cols);
    if k == 0 || k > max_rank {
        return Err(Error::invalid(format!("rank k = {k} outside 1..={max_rank}")));
    }
    if spectrum.len() > max_rank {
        return Err(Error::invalid(format!("spectrum has {} values, at most {max_rank} allowed", spectrum.len())));
    }
    if spectrum.iter().any(|s| !s.is_finite() || *s < T::zero()) {
        return Err(Error::invalid("spectrum values must be finite and non-negative"));
    }
    if spectrum.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::invalid("spectrum must be non-increasing"));
    }
    let r = spectrum.len();
    if r == 0 {
        return Ok(Matrix::zeros(d1, cols));
    }
    let u = haar_columns(&Matrix::from_fn(d1, r, |_, _| gaussian(rng)));
    let v = haar_columns(&Matrix::from_fn(cols, r, |_, _| gaussian(rng)));
    let mut us = u;
    for i in 0..d1 {
        for (j, &s) in spectrum.iter().enumerate() {
            us[(i, j)] *= s;
        }
    }
    Ok(us.matmul_t(&v))
}
