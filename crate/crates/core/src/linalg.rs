//! Pseudoinverse and Mahalanobis contracts shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::CoreError;

/// Default relative truncation threshold for pseudoinverses.
pub const DEFAULT_PINV_TOL: f64 = 1e-10;

/// Moore-Penrose pseudoinverse of a symmetric PSD matrix.
///
/// The input is symmetrized before the eigendecomposition; eigenvalues at or
/// below `tol * lambda_max` are treated as zero. Rank deficiency is the
/// normal case for ensemble covariances with N < d.
pub fn pseudoinverse(p: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = p.nrows();
    debug_assert_eq!(n, p.ncols());
    let sym = (p + p.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return DMatrix::zeros(n, n);
    }
    let cutoff = tol * max;
    let inv_vals = DVector::from_iterator(
        n,
        eig.eigenvalues.iter().map(|&l| if l > cutoff { 1.0 / l } else { 0.0 }),
    );
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals);
    &scaled * eig.eigenvectors.transpose()
}

/// Squared Mahalanobis norm x^T P^{-1} x for P > 0, via a Cholesky solve.
pub fn mahalanobis_sq(x: &DVector<f64>, p: &DMatrix<f64>) -> Result<f64, CoreError> {
    if p.nrows() != x.len() || p.ncols() != x.len() {
        return Err(CoreError::DimensionMismatch {
            expected: x.len(),
            found: p.nrows(),
            context: "mahalanobis_sq",
        });
    }
    let chol = p.clone().cholesky().ok_or(CoreError::NotPositiveDefinite)?;
    // |L^{-1} x|^2 is nonnegative by construction.
    let w = chol.l().solve_lower_triangular(x).ok_or(CoreError::NotPositiveDefinite)?;
    Ok(w.norm_squared())
}

/// Solve S X = B for symmetric positive definite S (innovation systems).
pub fn spd_solve(s: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, CoreError> {
    let chol = s.clone().cholesky().ok_or(CoreError::NotPositiveDefinite)?;
    Ok(chol.solve(b))
}

/// Innovation solve that survives outlier-poisoned covariances.
///
/// Cholesky handles the common case. When ensemble outliers stretch the
/// eigenvalues of S across more orders of magnitude than f64 carries, the
/// factorization fails on rounding even though S + Gamma is SPD in exact
/// arithmetic; the symmetric-eigendecomposition fallback clamps the spectrum,
/// which suppresses the poisoned directions in the gain instead of aborting.
pub fn innovation_solve(s: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(chol) = s.clone().cholesky() {
        return Some(chol.solve(b));
    }
    let eig = s.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return None;
    }
    let floor = 1e-16 * max;
    let inv_vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| 1.0 / l.max(floor)),
    );
    let qt_b = eig.eigenvectors.transpose() * b;
    let mut scaled = qt_b;
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= inv_vals[i];
    }
    Some(&eig.eigenvectors * scaled)
}
