//! Particle ensembles and their empirical statistics.
//!
//! All moments use the 1/N normalization, matching the update formulas the
//! solvers are built from, not the unbiased 1/(N-1) convention.

use nalgebra::{DMatrix, DVector};

use crate::error::CoreError;
use crate::linalg::pseudoinverse;

/// A collection of N state vectors in R^d, N >= 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<DVector<f64>>,
}

impl Ensemble {
    pub fn new(members: Vec<DVector<f64>>) -> Result<Self, CoreError> {
        if members.len() < 2 {
            return Err(CoreError::EnsembleTooSmall(members.len()));
        }
        let d = members[0].len();
        for m in &members {
            if m.len() != d {
                return Err(CoreError::DimensionMismatch {
                    expected: d,
                    found: m.len(),
                    context: "ensemble member dimension",
                });
            }
        }
        Ok(Self { members })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    pub fn members(&self) -> &[DVector<f64>] {
        &self.members
    }

    pub fn into_members(self) -> Vec<DVector<f64>> {
        self.members
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        for m in &self.members {
            acc += m;
        }
        acc / self.size() as f64
    }

    /// d x N matrix of centered members (u_n - mean), unscaled.
    pub fn centered(&self) -> DMatrix<f64> {
        let m = self.mean();
        let mut out = DMatrix::zeros(self.dim(), self.size());
        for (n, u) in self.members.iter().enumerate() {
            out.set_column(n, &(u - &m));
        }
        out
    }
}

/// Empirical means and (cross-)covariances of an ensemble and its images.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    /// Mean of the members.
    pub mean: DVector<f64>,
    /// Mean of the forward images.
    pub output_mean: DVector<f64>,
    /// d x d state covariance P^uu.
    pub puu: DMatrix<f64>,
    /// d x k state-output cross covariance P^uy.
    pub puy: DMatrix<f64>,
    /// k x k output covariance P^yy.
    pub pyy: DMatrix<f64>,
}

/// Means and 1/N-normalized centered (cross-)covariances of the ensemble and
/// its forward images `outputs[n] = G(members[n])`.
pub fn ensemble_stats(
    ensemble: &Ensemble,
    outputs: &[DVector<f64>],
) -> Result<EnsembleStats, CoreError> {
    let n = ensemble.size();
    if outputs.len() != n {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            found: outputs.len(),
            context: "ensemble_stats outputs count",
        });
    }
    let k = outputs[0].len();
    for g in outputs {
        if g.len() != k {
            return Err(CoreError::DimensionMismatch {
                expected: k,
                found: g.len(),
                context: "ensemble_stats output dimension",
            });
        }
    }
    let mean = ensemble.mean();
    let mut output_mean = DVector::zeros(k);
    for g in outputs {
        output_mean += g;
    }
    output_mean /= n as f64;

    let uc = ensemble.centered();
    let mut gc = DMatrix::zeros(k, n);
    for (j, g) in outputs.iter().enumerate() {
        gc.set_column(j, &(g - &output_mean));
    }
    let inv_n = 1.0 / n as f64;
    let puu = &uc * uc.transpose() * inv_n;
    let puy = &uc * gc.transpose() * inv_n;
    let pyy = &gc * gc.transpose() * inv_n;
    Ok(EnsembleStats { mean, output_mean, puu, puy, pyy })
}

/// Statistical linearization: the surrogate Jacobian G^N = (P^uy)^T (P^uu)^+.
///
/// Rank-deficient `puu` (N < d) is the normal case and is handled by the
/// pseudoinverse truncation at `tol` relative to the largest eigenvalue.
pub fn statistical_linearization(
    puy: &DMatrix<f64>,
    puu: &DMatrix<f64>,
    tol: f64,
) -> DMatrix<f64> {
    let pinv = pseudoinverse(puu, tol);
    puy.transpose() * pinv
}

/// Same quantity computed from centered factors without forming P^uu.
///
/// With A = Uc/sqrt(N) and B = Gc/sqrt(N) one has P^uu = A A^T, P^uy = A B^T
/// and, through the eigendecomposition A^T A = W diag(l) W^T,
/// G^N = B W diag(1/l) W^T A^T over the retained eigenvalues. For N << d this
/// replaces a d x d eigendecomposition with an N x N one. Agrees with the
/// dense route to roundoff (covered by a test).
pub fn stat_lin_from_factors(uc: &DMatrix<f64>, gc: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = uc.ncols();
    debug_assert_eq!(gc.ncols(), n);
    let inv_n = 1.0 / n as f64;
    let gram = uc.transpose() * uc * inv_n;
    let eig = gram.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let k = gc.nrows();
    let d = uc.nrows();
    if max <= 0.0 {
        return DMatrix::zeros(k, d);
    }
    let cutoff = tol * max;
    let inv_vals = DVector::from_iterator(
        n,
        eig.eigenvalues.iter().map(|&l| if l > cutoff { 1.0 / l } else { 0.0 }),
    );
    // B W diag(1/l) W^T A^T, with the 1/N factors folded into gram and here.
    let bw = gc * &eig.eigenvectors * inv_n.sqrt();
    let scaled = &bw * DMatrix::from_diagonal(&inv_vals);
    let wta = eig.eigenvectors.transpose() * uc.transpose() * inv_n.sqrt();
    &scaled * &wta
}
