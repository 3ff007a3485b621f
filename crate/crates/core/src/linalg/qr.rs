//! Householder QR.

use super::matrix::Matrix;
use crate::scalar::Scalar;

/// Full QR factorization `a = Q·R` with `Q` square orthogonal (`rows×rows`)
/// and `R` upper trapezoidal (`rows×cols`).
pub fn qr_full<T: Scalar>(a: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
    let (m, n) = a.shape();
    let mut r = a.clone();
    let mut q = Matrix::identity(m);
    for j in 0..n.min(m.saturating_sub(1)) {
        let norm = (j..m).map(|i| r[(i, j)] * r[(i, j)]).sum::<T>().sqrt();
        if norm == T::zero() {
            continue;
        }
        let alpha = if r[(j, j)] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = (j..m).map(|i| r[(i, j)]).collect();
        v[0] -= alpha;
        let vnorm_sq: T = v.iter().map(|&x| x * x).sum();
        if vnorm_sq == T::zero() {
            continue;
        }
        let two = T::of(2.0);
        // R ← (I − 2vvᵀ/vᵀv) R
        for c in j..n {
            let s: T = v.iter().enumerate().map(|(k, &vk)| vk * r[(j + k, c)]).sum();
            let f = two * s / vnorm_sq;
            for (k, &vk) in v.iter().enumerate() {
                r[(j + k, c)] -= f * vk;
            }
        }
        // Q ← Q (I − 2vvᵀ/vᵀv)
        for row in 0..m {
            let s: T = v.iter().enumerate().map(|(k, &vk)| q[(row, j + k)] * vk).sum();
            let f = two * s / vnorm_sq;
            for (k, &vk) in v.iter().enumerate() {
                q[(row, j + k)] -= f * vk;
            }
        }
    }
    for i in 0..m {
        for j in 0..i.min(n) {
            r[(i, j)] = T::zero();
        }
    }
    (q, r)
}

/// Column-orthonormal basis (`rows×cols`, requires `rows ≥ cols`) whose
/// leading columns span the same space as those of `a` when `a` has full
/// column rank.
pub fn orthonormalize<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    assert!(a.rows() >= a.cols(), "orthonormalize needs a tall matrix");
    let (q, _) = qr_full(a);
    q.column_block(0, a.cols())
}

/// Haar-distributed column-orthonormal matrix from a Gaussian draw: QR with
/// the signs of `diag(R)` folded into `Q`.
pub(crate) fn haar_columns<T: Scalar>(gauss: &Matrix<T>) -> Matrix<T> {
    let (q, r) = qr_full(gauss);
    let mut out = q.column_block(0, gauss.cols());
    for j in 0..gauss.cols() {
        if r[(j, j)] < T::zero() {
            for i in 0..out.rows() {
                out[(i, j)] = -out[(i, j)];
            }
        }
    }
    out
}
