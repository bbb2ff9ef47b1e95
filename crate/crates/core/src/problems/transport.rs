//! Transport benchmark: recover the coefficient u(x) of the first-order PDE
//!   dv/dx1 - dv/dx2 - u(x1) v = 0,  v(x1, 0) = phi(x1) = cos(x1),
//! whose solution is v(x1, x2) = phi(x1 + x2) exp(int_{x1+x2}^{x1} u(z) dz).
//!
//! u is expanded in 30 sine and 30 cosine modes (d = 60); the integral uses
//! the exact antiderivatives of the basis, so the forward map carries no
//! quadrature error. v is observed on a 21 x 21 uniform grid (k = 441).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::model::{ForwardModel, InverseProblem, NoiseModel};

use super::noisy_data;

/// Number of sine (and cosine) modes.
pub const TRANSPORT_MODES: usize = 30;
/// Grid points per side.
pub const TRANSPORT_GRID: usize = 21;
/// Observation noise level.
pub const TRANSPORT_SIGMA: f64 = 0.1;

/// Coefficient layout: `coeffs[j]` multiplies sin((j+1) pi x) for j < 30 and
/// `coeffs[30 + j]` multiplies cos((j+1) pi x).
#[derive(Debug, Clone)]
pub struct TransportModel {
    /// Antiderivative basis at the 21 distinct x1 values (21 x 60).
    anti_x1: DMatrix<f64>,
    /// Antiderivative basis at the 41 distinct x1 + x2 values (41 x 60).
    anti_s: DMatrix<f64>,
    /// phi(x1 + x2) = cos(x1 + x2) at the 41 distinct sums.
    phi_s: DVector<f64>,
}

/// Antiderivative of the basis functions: int sin(m pi z) dz = -cos(m pi z)/(m pi),
/// int cos(m pi z) dz = sin(m pi z)/(m pi).
fn antiderivative_row(z: f64) -> [f64; 2 * TRANSPORT_MODES] {
    let mut row = [0.0; 2 * TRANSPORT_MODES];
    for j in 0..TRANSPORT_MODES {
        let m = (j + 1) as f64 * std::f64::consts::PI;
        row[j] = -(m * z).cos() / m;
        row[TRANSPORT_MODES + j] = (m * z).sin() / m;
    }
    row
}

impl TransportModel {
    pub fn new() -> Self {
        let n = TRANSPORT_GRID;
        let h = 1.0 / (n - 1) as f64;
        let anti_x1 = DMatrix::from_fn(n, 2 * TRANSPORT_MODES, |i, c| {
            antiderivative_row(i as f64 * h)[c]
        });
        let n_sums = 2 * n - 1;
        let anti_s = DMatrix::from_fn(n_sums, 2 * TRANSPORT_MODES, |s, c| {
            antiderivative_row(s as f64 * h)[c]
        });
        let phi_s = DVector::from_fn(n_sums, |s, _| (s as f64 * h).cos());
        Self { anti_x1, anti_s, phi_s }
    }

    /// u(x) = sum_j coeffs[j] sin((j+1) pi x) + coeffs[30+j] cos((j+1) pi x),
    /// valid for any real x (the solution formula needs x up to 2).
    pub fn coefficient_function(coeffs: &DVector<f64>, x: f64) -> f64 {
        let mut u = 0.0;
        for j in 0..TRANSPORT_MODES {
            let m = (j + 1) as f64 * std::f64::consts::PI;
            u += coeffs[j] * (m * x).sin() + coeffs[TRANSPORT_MODES + j] * (m * x).cos();
        }
        u
    }

    /// Solution values on an arbitrary m x m uniform grid (consistency tests
    /// refine the grid; the forward map itself is fixed at 21 x 21).
    pub fn solution_on_grid(coeffs: &DVector<f64>, m: usize) -> DMatrix<f64> {
        let h = 1.0 / (m - 1) as f64;
        let mut v = DMatrix::zeros(m, m);
        for i1 in 0..m {
            let x1 = i1 as f64 * h;
            let ux1 = antiderivative_value(coeffs, x1);
            for i2 in 0..m {
                let s = x1 + i2 as f64 * h;
                let us = antiderivative_value(coeffs, s);
                v[(i1, i2)] = s.cos() * (ux1 - us).exp();
            }
        }
        v
    }
}

fn antiderivative_value(coeffs: &DVector<f64>, z: f64) -> f64 {
    let row = antiderivative_row(z);
    coeffs.iter().zip(row.iter()).map(|(c, r)| c * r).sum()
}

impl Default for TransportModel {
    fn default() -> Self {
        Self::new()
    }
}

impl ForwardModel for TransportModel {
    fn input_dim(&self) -> usize {
        2 * TRANSPORT_MODES
    }

    fn output_dim(&self) -> usize {
        TRANSPORT_GRID * TRANSPORT_GRID
    }

    /// Node ordering: index = i1 * 21 + i2 with x1 = i1/20, x2 = i2/20.
    fn apply(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        let n = TRANSPORT_GRID;
        let ux1 = &self.anti_x1 * coeffs;
        let us = &self.anti_s * coeffs;
        let mut v = DVector::zeros(n * n);
        for i1 in 0..n {
            for i2 in 0..n {
                let s = i1 + i2;
                v[i1 * n + i2] = self.phi_s[s] * (ux1[i1] - us[s]).exp();
            }
        }
        v
    }
}

/// The transport benchmark problem with data generated from the paper's
/// sparse truth.
#[derive(Clone)]
pub struct TransportProblem {
    pub problem: InverseProblem,
}

impl TransportProblem {
    pub fn new(seed: u64) -> Self {
        let model = TransportModel::new();
        let truth = make_transport_truth();
        let clean = model.apply(&truth);
        let data = noisy_data(&clean, TRANSPORT_SIGMA, seed);
        let noise = NoiseModel::isotropic(TRANSPORT_GRID * TRANSPORT_GRID, TRANSPORT_SIGMA);
        let support: Vec<usize> =
            truth.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        let problem = InverseProblem::new(Arc::new(model), noise, data)
            .expect("dimensions consistent by construction")
            .with_truth(truth, support);
        Self { problem }
    }
}

/// Coefficients realizing the target
/// u(x) = 1.2 (sin(pi x) + sin(3 pi x) - sin(6 pi x) - cos(3 pi x))
///      - 0.6 (cos(pi x) - cos(6 pi x)):
/// six of the sixty components are nonzero.
pub fn make_transport_truth() -> DVector<f64> {
    let mut truth = DVector::zeros(2 * TRANSPORT_MODES);
    truth[0] = 1.2; // sin(pi x)
    truth[2] = 1.2; // sin(3 pi x)
    truth[5] = -1.2; // sin(6 pi x)
    truth[TRANSPORT_MODES] = -0.6; // cos(pi x)
    truth[TRANSPORT_MODES + 2] = -1.2; // cos(3 pi x)
    truth[TRANSPORT_MODES + 5] = 0.6; // cos(6 pi x)
    truth
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn truth_has_six_nonzeros() {
        let truth = make_transport_truth();
        assert_eq!(truth.iter().filter(|&&v| v != 0.0).count(), 6);
        assert_eq!(truth.len(), 60);
    }

    #[test]
    fn truth_value_at_zero() {
        // only the cosines contribute at x = 0: -0.6 - 1.2 + 0.6 = -1.2
        let truth = make_transport_truth();
        assert_relative_eq!(
            TransportModel::coefficient_function(&truth, 0.0),
            -1.2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn truth_matches_displayed_function() {
        let truth = make_transport_truth();
        let pi = std::f64::consts::PI;
        for k in 0..=100 {
            let x = k as f64 / 100.0;
            let expected = 1.2
                * ((pi * x).sin() + (3.0 * pi * x).sin()
                    - (6.0 * pi * x).sin()
                    - (3.0 * pi * x).cos())
                - 0.6 * ((pi * x).cos() - (6.0 * pi * x).cos());
            assert_relative_eq!(
                TransportModel::coefficient_function(&truth, x),
                expected,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn zero_coefficients_give_cosine_of_sum() {
        let model = TransportModel::new();
        let v = model.apply(&DVector::zeros(60));
        let h = 1.0 / 20.0;
        for i1 in 0..21 {
            for i2 in 0..21 {
                let expected = ((i1 + i2) as f64 * h).cos();
                assert_relative_eq!(v[i1 * 21 + i2], expected, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn single_sine_mode_hand_value() {
        // u_1 = 1 at (0.5, 0.5): v = cos(1) exp((cos(pi) - cos(pi/2)) / pi)
        let model = TransportModel::new();
        let mut coeffs = DVector::zeros(60);
        coeffs[0] = 1.0;
        let v = model.apply(&coeffs);
        let expected = 1.0_f64.cos() * (-1.0 / std::f64::consts::PI).exp();
        assert_relative_eq!(v[10 * 21 + 10], expected, epsilon = 1e-12);
    }

    #[test]
    fn forward_matches_grid_helper() {
        let truth = make_transport_truth();
        let model = TransportModel::new();
        let v = model.apply(&truth);
        let grid = TransportModel::solution_on_grid(&truth, 21);
        for i1 in 0..21 {
            for i2 in 0..21 {
                assert_relative_eq!(v[i1 * 21 + i2], grid[(i1, i2)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn problem_has_consistent_dimensions() {
        let tp = TransportProblem::new(4);
        assert_eq!(tp.problem.input_dim(), 60);
        assert_eq!(tp.problem.output_dim(), 441);
        assert_eq!(tp.problem.support.as_ref().unwrap().len(), 6);
    }
}
