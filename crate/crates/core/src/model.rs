//! Forward-map interface, noise model, and prior covariance operators.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::rng::{psd_sqrt, standard_normal_vector};

/// Default variance floor applied wherever D_theta is inverted or sampled.
pub const DEFAULT_THETA_FLOOR: f64 = 1e-8;

/// Deterministic map G: R^d -> R^k. Implementations must be safe to evaluate
/// concurrently on distinct inputs; the solvers evaluate whole ensembles in
/// parallel.
pub trait ForwardModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, u: &DVector<f64>) -> DVector<f64>;

    /// Exact Jacobian at `u`, if the model can provide one (test oracles and
    /// Hessian evaluations; the solvers themselves never differentiate).
    fn jacobian(&self, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// Componentwise second directional derivative d^2/dt^2 G(u + t v) at
    /// t = 0, if available in closed form. Linear models return zero.
    fn second_directional_derivative(
        &self,
        _u: &DVector<f64>,
        _v: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        None
    }
}

/// G(u) = G u for an explicit matrix.
#[derive(Debug, Clone)]
pub struct LinearModel {
    matrix: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl ForwardModel for LinearModel {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.matrix * u
    }

    fn jacobian(&self, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.matrix.clone())
    }

    fn second_directional_derivative(
        &self,
        _u: &DVector<f64>,
        _v: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        Some(DVector::zeros(self.matrix.nrows()))
    }
}

/// Measurement noise epsilon ~ N(0, Gamma) with Gamma > 0.
///
/// The Cholesky factor is cached for sampling and Mahalanobis solves. A
/// diagonal Gamma gets a componentwise fast path.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    gamma: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    diag_std: Option<DVector<f64>>,
    trace: f64,
}

impl NoiseModel {
    pub fn new(gamma: DMatrix<f64>) -> Result<Self, CoreError> {
        if gamma.nrows() != gamma.ncols() {
            return Err(CoreError::DimensionMismatch {
                expected: gamma.nrows(),
                found: gamma.ncols(),
                context: "noise covariance",
            });
        }
        let chol = gamma.clone().cholesky().ok_or(CoreError::NotPositiveDefinite)?;
        let is_diagonal = gamma
            .row_iter()
            .enumerate()
            .all(|(i, row)| row.iter().enumerate().all(|(j, &v)| i == j || v == 0.0));
        let diag_std = is_diagonal
            .then(|| DVector::from_iterator(gamma.nrows(), gamma.diagonal().iter().map(|v| v.sqrt())));
        let trace = gamma.trace();
        Ok(Self { gamma, chol, diag_std, trace })
    }

    /// Isotropic noise sigma^2 I_k.
    pub fn isotropic(dim: usize, sigma: f64) -> Self {
        Self::new(DMatrix::from_diagonal(&DVector::repeat(dim, sigma * sigma)))
            .expect("sigma^2 I is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// Draw from N(center, scale * Gamma).
    pub fn sample_around(
        &self,
        center: &DVector<f64>,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> DVector<f64> {
        let z = standard_normal_vector(rng, self.dim());
        let s = scale.sqrt();
        match &self.diag_std {
            Some(std) => center + s * std.component_mul(&z),
            None => center + s * (self.chol.l() * z),
        }
    }

    /// Squared Mahalanobis norm |x|^2_Gamma = x^T Gamma^{-1} x.
    pub fn mahalanobis_sq(&self, x: &DVector<f64>) -> f64 {
        let w = self
            .chol
            .l()
            .solve_lower_triangular(x)
            .expect("cached Cholesky factor is nonsingular");
        w.norm_squared()
    }
}

/// Per-component variances theta_i >= 0 defining D_theta = diag(theta).
///
/// Exact zeros are legal (the theta-update produces them); the floor kicks in
/// only when the matrix is inverted or sampled from.
#[derive(Debug, Clone)]
pub struct DiagCovariance {
    theta: DVector<f64>,
    floor: f64,
}

impl DiagCovariance {
    pub fn new(theta: DVector<f64>, floor: f64) -> Result<Self, CoreError> {
        assert!(floor > 0.0, "variance floor must be positive");
        for (i, &v) in theta.iter().enumerate() {
            if v < 0.0 {
                return Err(CoreError::NegativeVariance { index: i, value: v });
            }
        }
        Ok(Self { theta, floor })
    }

    pub fn with_default_floor(theta: DVector<f64>) -> Result<Self, CoreError> {
        Self::new(theta, DEFAULT_THETA_FLOOR)
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// The stored variances, zeros preserved.
    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// max(theta_i, floor), the diagonal actually used in solves and draws.
    pub fn floored(&self) -> DVector<f64> {
        self.theta.map(|v| v.max(self.floor))
    }

    /// Diagonal of D_theta^{-1} with the floor applied.
    pub fn inv_floored(&self) -> DVector<f64> {
        self.theta.map(|v| 1.0 / v.max(self.floor))
    }

    /// Draw from N(0, scale * D_theta) with the floor applied.
    pub fn sample(&self, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = standard_normal_vector(rng, self.dim());
        let s = scale.sqrt();
        DVector::from_iterator(
            self.dim(),
            self.theta
                .iter()
                .zip(z.iter())
                .map(|(&t, &zi)| s * t.max(self.floor).sqrt() * zi),
        )
    }
}

/// Dense PSD covariance with a cached symmetric square root for sampling.
#[derive(Debug, Clone)]
pub struct DenseCovariance {
    matrix: DMatrix<f64>,
    sqrt: DMatrix<f64>,
}

impl DenseCovariance {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, CoreError> {
        let sqrt = psd_sqrt(&matrix)?;
        Ok(Self { matrix, sqrt })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn sample(&self, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = standard_normal_vector(rng, self.dim());
        scale.sqrt() * (&self.sqrt * z)
    }
}

/// Prior covariance P in either diagonal or dense form.
#[derive(Debug, Clone)]
pub enum Prior {
    Diagonal(DiagCovariance),
    Dense(DenseCovariance),
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::Diagonal(d) => d.dim(),
            Prior::Dense(d) => d.dim(),
        }
    }

    /// Draw from N(0, scale * P).
    pub fn sample(&self, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            Prior::Diagonal(d) => d.sample(scale, rng),
            Prior::Dense(d) => d.sample(scale, rng),
        }
    }

    /// P * GN^T for a k x d matrix GN; the workhorse of the gain formulas.
    pub fn mul_transposed(&self, gn: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Prior::Diagonal(d) => {
                let floored = d.floored();
                let mut out = gn.transpose();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= floored[i];
                }
                out
            }
            Prior::Dense(d) => d.matrix() * gn.transpose(),
        }
    }
}

/// An inverse problem: forward map, noise covariance, observed data, and
/// (for synthetic benchmarks) the ground truth with its sparsity support.
#[derive(Clone)]
pub struct InverseProblem {
    pub forward: Arc<dyn ForwardModel>,
    pub noise: NoiseModel,
    pub data: DVector<f64>,
    pub truth: Option<DVector<f64>>,
    pub support: Option<Vec<usize>>,
}

impl InverseProblem {
    pub fn new(
        forward: Arc<dyn ForwardModel>,
        noise: NoiseModel,
        data: DVector<f64>,
    ) -> Result<Self, CoreError> {
        if noise.dim() != forward.output_dim() {
            return Err(CoreError::DimensionMismatch {
                expected: forward.output_dim(),
                found: noise.dim(),
                context: "noise dimension vs forward output",
            });
        }
        if data.len() != forward.output_dim() {
            return Err(CoreError::DimensionMismatch {
                expected: forward.output_dim(),
                found: data.len(),
                context: "data dimension vs forward output",
            });
        }
        Ok(Self { forward, noise, data, truth: None, support: None })
    }

    pub fn with_truth(mut self, truth: DVector<f64>, support: Vec<usize>) -> Self {
        self.truth = Some(truth);
        self.support = Some(support);
        self
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.forward.output_dim()
    }

    /// Euclidean data misfit |y - G(u)|.
    pub fn misfit(&self, u: &DVector<f64>) -> f64 {
        (&self.data - self.forward.apply(u)).norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Purpose, StreamKey};
    use approx::assert_relative_eq;

    #[test]
    fn noise_rejects_indefinite() {
        let gamma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(NoiseModel::new(gamma).is_err());
    }

    #[test]
    fn noise_sampling_scale() {
        // Var of draws with scale c must be c * Gamma, checked on the diagonal.
        let noise = NoiseModel::isotropic(2, 0.5);
        let mut rng = stream_rng(9, StreamKey::new(Purpose::Generic, 0, 0, 0));
        let center = DVector::zeros(2);
        let scale = 4.0;
        let n = 40_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let d = noise.sample_around(&center, scale, &mut rng);
            acc += d[0] * d[0];
        }
        let var = acc / n as f64;
        // expected 4 * 0.25 = 1, CLT tolerance
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn dense_and_diag_noise_agree_on_mahalanobis() {
        let gamma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 4.0]));
        let noise = NoiseModel::new(gamma).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_relative_eq!(noise.mahalanobis_sq(&x), 4.0 + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn diag_covariance_floor_applies_only_at_inversion() {
        let theta = DVector::from_vec(vec![0.0, 2.0]);
        let d = DiagCovariance::new(theta.clone(), 1e-8).unwrap();
        assert_eq!(d.theta()[0], 0.0);
        assert_eq!(d.floored()[0], 1e-8);
        assert_eq!(d.inv_floored()[1], 0.5);
    }

    #[test]
    fn diag_covariance_rejects_negative() {
        let theta = DVector::from_vec(vec![-0.1]);
        assert!(DiagCovariance::new(theta, 1e-8).is_err());
    }

    #[test]
    fn prior_mul_transposed_matches_dense() {
        let theta = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let diag = Prior::Diagonal(DiagCovariance::new(theta.clone(), 1e-8).unwrap());
        let dense = Prior::Dense(DenseCovariance::new(DMatrix::from_diagonal(&theta)).unwrap());
        let gn = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -1.0, 2.0, 0.0, 1.0]);
        let a = diag.mul_transposed(&gn);
        let b = dense.mul_transposed(&gn);
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn linear_model_jacobian_is_matrix() {
        let g = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = LinearModel::new(g.clone());
        let u = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        assert_eq!(m.jacobian(&u).unwrap(), g);
        assert_eq!(m.apply(&u), &g * &u);
        assert_eq!(m.second_directional_derivative(&u, &u).unwrap(), DVector::zeros(2));
    }
}
