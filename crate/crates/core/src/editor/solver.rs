//! Closed-form activation vectors. With a single fact per edit the update
//! factors as `Δ = α βᵀ` with `α = R`.

use nalgebra::{DMatrix, DVector};

use super::{EditConfig, EditorState, Method};
use crate::error::{EditError, Result};
use crate::linalg::{self, check_len, sorted_sym_eigen};

/// Below this ratio of smallest to largest eigenvalue the memit system is
/// treated as singular and regularized.
const SINGULAR_RATIO: f64 = 1e-12;

/// `β = (C0 + k kᵀ)⁻¹ k`, `α = R`.
///
/// If the system is numerically singular, `λI` with
/// `λ = 1e-8 · tr(C0) / d_in` is added first.
pub fn solve_memit(
    residual: &DVector<f64>,
    key: &DVector<f64>,
    c0: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = key.len();
    if c0.nrows() != d || c0.ncols() != d {
        return Err(EditError::DimensionMismatch {
            expected: d,
            found: c0.nrows(),
            context: "C0 vs key",
        });
    }
    let mut system = c0 + key * key.transpose();
    linalg::symmetrize(&mut system);
    let (values, _) = sorted_sym_eigen(&system);
    let (max, min) = (values[0], values[d - 1]);
    if !(max > 0.0) || min <= SINGULAR_RATIO * max {
        let lambda = 1e-8 * c0.trace() / d as f64;
        if !(lambda > 0.0) {
            return Err(EditError::Singular("C0 + k kᵀ with zero-trace C0"));
        }
        for i in 0..d {
            system[(i, i)] += lambda;
        }
    }
    let chol = system
        .clone()
        .cholesky()
        .ok_or(EditError::Singular("C0 + k kᵀ"))?;
    let beta = chol.solve(key);
    if !linalg::all_finite_vec(&beta) {
        return Err(EditError::Singular("C0 + k kᵀ"));
    }
    Ok((residual.clone(), beta))
}

/// `β` solving `(ℙ Kp Kpᵀ + ℙ k kᵀ + I) β = ℙ k` by LU; `α = R`.
pub fn solve_null_space_beta(
    key: &DVector<f64>,
    null_proj: &DMatrix<f64>,
    kp_gram: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let d = key.len();
    let rhs = null_proj * key;
    let mut system = null_proj * kp_gram + (null_proj * key) * key.transpose();
    for i in 0..d {
        system[(i, i)] += 1.0;
    }
    let beta = system
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(EditError::Singular("null-space activation system"))?;
    let resid = (&system * &beta - &rhs).norm();
    if !(resid <= 1e-8 * rhs.norm()) {
        return Err(EditError::Singular("null-space activation residual check"));
    }
    Ok(beta)
}

/// Dispatches on `config.method` to the matching activation-vector formula.
pub fn solve_alpha_beta(
    residual: &DVector<f64>,
    key: &DVector<f64>,
    state: &EditorState,
    config: &EditConfig,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_len(key, state.d_in(), "key vs editor")?;
    check_len(residual, state.d_out(), "residual vs editor")?;
    match config.method {
        Method::Memit => solve_memit(residual, key, &state.c0),
        Method::AlphaEdit | Method::DeltaEdit => {
            let beta = solve_null_space_beta(key, &state.null_proj, &state.kp_gram)?;
            Ok((residual.clone(), beta))
        }
    }
}
