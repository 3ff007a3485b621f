//! Dense linear algebra: matrices, SVD, QR, and subspace metrics.

mod matrix;
mod qr;
mod subspace;
mod svd;

pub use matrix::Matrix;
pub use qr::{orthonormalize, qr_full};
pub use subspace::{
    diversity_metrics, generate_planted, optimal_rank_k, orthonormal_complement, orthonormality_defect,
    principal_angle_dist, principal_angle_dist_via_complement, DiversitySummary, RankKApprox,
};
pub use svd::{singular_values, svd, SvdResult};
