//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.

use super::matrix::{axpy, dot, Matrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `m = U · diag(σ) · Vᵀ` with `r = min(rows, cols)` singular triplets.
#[derive(Clone, Debug)]
pub struct SvdResult<T> {
    pub left_vectors: Matrix<T>,
    pub singular_values: Vec<T>,
    pub right_vectors: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut us = self.left_vectors.clone();
        for i in 0..us.rows() {
            for (j, &s) in self.singular_values.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&self.right_vectors)
    }
}

const MAX_SWEEPS: usize = 80;

/// Full thin SVD. Singular values are sorted non-increasing; columns for
/// (numerically) zero singular values are completed to an orthonormal set.
pub fn svd<T: Scalar>(m: &Matrix<T>) -> Result<SvdResult<T>> {
    if !m.is_finite() {
        return Err(Error::invalid("svd input has non-finite entries"));
    }
    if m.rows() >= m.cols() {
        Ok(jacobi_tall(m))
    } else {
        let t = jacobi_tall(&m.transpose());
        Ok(SvdResult { left_vectors: t.right_vectors, singular_values: t.singular_values, right_vectors: t.left_vectors })
    }
}

/// Singular values only, sorted non-increasing.
pub fn singular_values<T: Scalar>(m: &Matrix<T>) -> Result<Vec<T>> {
    svd(m).map(|s| s.singular_values)
}

fn jacobi_tall<T: Scalar>(m: &Matrix<T>) -> SvdResult<T> {
    let (rows, n) = m.shape();
    // column-major working copies
    let mut a: Vec<Vec<T>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<T>> = (0..n).map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect()).collect();
    let eps = T::epsilon();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<T> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));

    let sigma_max = norms[order[0]];
    let cutoff = sigma_max * eps * T::of((rows.max(n) * 4) as f64);
    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        v_cols.push(v[j].clone());
        if s > cutoff && s > T::zero() {
            u_cols.push(a[j].iter().map(|&x| x / s).collect());
        } else {
            u_cols.push(vec![T::zero(); rows]);
            missing.push(slot);
        }
    }
    if !missing.is_empty() {
        let known: Vec<usize> = (0..n).filter(|i| !missing.contains(i)).collect();
        let mut basis: Vec<Vec<T>> = known.iter().map(|&i| u_cols[i].clone()).collect();
        for &slot in &missing {
            let col = complete_basis(&basis, rows);
            basis.push(col.clone());
            u_cols[slot] = col;
        }
    }
    SvdResult {
        left_vectors: Matrix::from_columns(rows, &u_cols),
        singular_values: sigma,
        right_vectors: Matrix::from_columns(n, &v_cols),
    }
}

#[inline]
fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Unit vector orthogonal to every vector of `basis` (assumed orthonormal),
/// taken from the standard basis vector with the largest residual.
pub(crate) fn complete_basis<T: Scalar>(basis: &[Vec<T>], dim: usize) -> Vec<T> {
    let mut best: Option<(T, Vec<T>)> = None;
    for e in 0..dim {
        let mut cand = vec![T::zero(); dim];
        cand[e] = T::one();
        // two passes of Gram-Schmidt
        for _ in 0..2 {
            for b in basis {
                let proj = dot(b, &cand);
                axpy(&mut cand, -proj, b);
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if best.as_ref().map_or(true, |(n, _)| norm > *n) {
            best = Some((norm, cand));
        }
    }
    let (norm, mut cand) = best.expect("dim > 0");
    cand.iter_mut().for_each(|x| *x /= norm);
    cand
}
