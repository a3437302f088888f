//! Small dense helpers on top of faer.

use faer::linalg::solvers::Solve;
use faer::{Mat, MatRef, Side};

use crate::{Error, Result};

/// `scale · AᵀA`.
pub(crate) fn crossprod(a: MatRef<'_, f64>, scale: f64) -> Mat<f64> {
    let mut out = a.transpose() * a;
    out *= faer::Scale(scale);
    out
}

/// `scale · Aᵀ B`.
pub(crate) fn crossprod2(a: MatRef<'_, f64>, b: MatRef<'_, f64>, scale: f64) -> Mat<f64> {
    let mut out = a.transpose() * b;
    out *= faer::Scale(scale);
    out
}

pub(crate) fn trace(a: &Mat<f64>) -> f64 {
    (0..a.nrows().min(a.ncols())).map(|i| a[(i, i)]).sum()
}

/// Solves `(A + shift·I) X = rhs` for symmetric positive (semi)definite `A`
/// by Cholesky. If the factorization fails, `jitter` is added to the
/// diagonal and doubled up to `max_doublings` times. Returns the solution
/// and the jitter that was finally used (0 when none was needed).
pub(crate) fn spd_solve(
    a: &Mat<f64>,
    shift: f64,
    rhs: MatRef<'_, f64>,
    jitter: f64,
    max_doublings: u32,
) -> Result<(Mat<f64>, f64)> {
    let n = a.nrows();
    let mut extra = 0.0;
    for attempt in 0..=max_doublings + 1 {
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += shift + extra;
        }
        if let Ok(llt) = m.llt(Side::Lower) {
            let x = llt.solve(rhs);
            if x.col_iter().all(|c| c.iter().all(|v| v.is_finite())) {
                return Ok((x, extra));
            }
        }
        extra = if attempt == 0 { jitter } else { extra * 2.0 };
    }
    Err(Error::Factorization(format!("Cholesky failed with jitter up to {extra:e}")))
}

/// General square solve by partial-pivot LU; errors on a non-finite result.
pub(crate) fn lu_solve(a: &Mat<f64>, rhs: MatRef<'_, f64>) -> Result<Mat<f64>> {
    let x = a.partial_piv_lu().solve(rhs);
    if x.col_iter().all(|c| c.iter().all(|v| v.is_finite())) {
        Ok(x)
    } else {
        Err(Error::Factorization("singular linear system".into()))
    }
}

pub(crate) fn symmetric_eigenvalues(a: &Mat<f64>) -> Result<Vec<f64>> {
    a.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Factorization(format!("eigenvalue iteration failed: {e:?}")))
}

pub(crate) fn col_vec(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub(crate) fn to_vec(m: MatRef<'_, f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, 0)]).collect()
}

/// Dense matrix from row slices.
pub(crate) fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Mat<f64> {
    Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}
