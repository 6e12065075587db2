//! Projectors: the null space of the preserved-knowledge covariance, and
//! the complement of the column space of accumulated edits.

use nalgebra::DMatrix;

use crate::error::{EditError, Result};
use crate::linalg::{self, sorted_sym_eigen};

/// `ℙ = V_null V_nullᵀ` over eigenvectors of `C0` with eigenvalue at most
/// `eig_zero_rel · λ_max`.
pub fn compute_null_projection(c0: &DMatrix<f64>, eig_zero_rel: f64) -> Result<DMatrix<f64>> {
    if !c0.is_square() {
        return Err(EditError::DimensionMismatch {
            expected: c0.nrows(),
            found: c0.ncols(),
            context: "C0 must be square",
        });
    }
    if !linalg::all_finite_mat(c0) {
        return Err(EditError::NonFinite("C0"));
    }
    let asym = linalg::asymmetry(c0);
    if asym > 1e-10 * c0.norm().max(1.0) {
        return Err(EditError::NotSymmetric(asym));
    }
    let (values, vectors) = sorted_sym_eigen(c0);
    let lambda_max = values.iter().cloned().fold(0.0, f64::max);
    let n = c0.nrows();
    let null_cols: Vec<usize> = (0..n).filter(|&i| values[i] <= eig_zero_rel * lambda_max).collect();
    let mut basis = DMatrix::zeros(n, null_cols.len());
    for (dst, &src) in null_cols.iter().enumerate() {
        basis.set_column(dst, &vectors.column(src));
    }
    let mut p = &basis * basis.transpose();
    linalg::symmetrize(&mut p);
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct HistoryProjector {
    /// `P = I − Û Ûᵀ`.
    pub projector: DMatrix<f64>,
    /// Retained eigenvectors `Û` as columns.
    pub basis: DMatrix<f64>,
    /// Number of eigenvalues above the zero tolerance before capping.
    pub nonzero_eigenvalues: usize,
}

impl HistoryProjector {
    pub fn retained(&self) -> usize {
        self.basis.ncols()
    }
}

pub fn rank_cap(d_out: usize, rank_cap_ratio: f64) -> usize {
    (rank_cap_ratio * d_out as f64).floor() as usize
}

/// Builds `P = I − ÛÛᵀ` from the eigenvectors of `Δ_history Δ_historyᵀ`
/// with non-zero eigenvalues, keeping at most `floor(rank_cap_ratio·d_out)`
/// of the largest.
pub fn build_history_projector(
    delta_history: &DMatrix<f64>,
    rank_cap_ratio: f64,
    eig_zero_rel: f64,
) -> Result<HistoryProjector> {
    if !linalg::all_finite_mat(delta_history) {
        return Err(EditError::NonFinite("delta_history"));
    }
    let d_out = delta_history.nrows();
    let mut d = delta_history * delta_history.transpose();
    linalg::symmetrize(&mut d);
    let (values, vectors) = sorted_sym_eigen(&d);
    let lambda_max = values.iter().cloned().fold(0.0, f64::max);
    let nonzero = if lambda_max > 0.0 {
        values.iter().filter(|&&l| l > eig_zero_rel * lambda_max).count()
    } else {
        0
    };
    // eigenpairs are sorted descending, so dropping the smallest keeps a prefix
    let keep = nonzero.min(rank_cap(d_out, rank_cap_ratio));
    let basis = vectors.columns(0, keep).into_owned();
    Ok(HistoryProjector {
        projector: linalg::complement_projector(&basis),
        basis,
        nonzero_eigenvalues: nonzero,
    })
}
