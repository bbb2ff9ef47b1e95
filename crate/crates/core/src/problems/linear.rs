//! Underdetermined linear compressed-sensing benchmark: y = G u + eps with a
//! Gaussian design matrix and a sparse truth.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::model::{InverseProblem, LinearModel, NoiseModel};
use crate::rng::{standard_normal_vector, stream_rng, Purpose, StreamKey};

use super::noisy_data;

/// Noise level of the linear benchmark: Gamma = 0.01 I_k.
pub const LINEAR_SIGMA: f64 = 0.1;

/// A generated linear benchmark with its design matrix kept accessible (the
/// exact alternation oracle needs it).
#[derive(Clone)]
pub struct LinearBenchmark {
    pub matrix: DMatrix<f64>,
    pub problem: InverseProblem,
}

/// Build the linear benchmark: G (k x d) with i.i.d. standard normal entries,
/// a truth with `sparsity` nonzero entries at seeded positions and magnitudes
/// drawn uniformly from +-[1, 2], and data y = G u + eps, eps ~ N(0, 0.01 I).
pub fn make_linear_problem(d: usize, k: usize, sparsity: usize, seed: u64) -> LinearBenchmark {
    assert!(sparsity <= d, "sparsity cannot exceed the dimension");
    let mut rng = stream_rng(seed, StreamKey::new(Purpose::ProblemMatrix, 0, 0, 0));
    let g = DMatrix::from_fn(k, d, |_, _| standard_normal_vector(&mut rng, 1)[0]);

    let mut truth_rng = stream_rng(seed, StreamKey::new(Purpose::ProblemTruth, 0, 0, 0));
    let mut indices: Vec<usize> = (0..d).collect();
    for i in 0..sparsity {
        let j = truth_rng.random_range(i..d);
        indices.swap(i, j);
    }
    let mut support: Vec<usize> = indices[..sparsity].to_vec();
    support.sort_unstable();

    let mut truth = DVector::zeros(d);
    for &i in &support {
        let magnitude = truth_rng.random_range(1.0..2.0);
        let sign = if truth_rng.random_bool(0.5) { 1.0 } else { -1.0 };
        truth[i] = sign * magnitude;
    }

    let clean = &g * &truth;
    let data = noisy_data(&clean, LINEAR_SIGMA, seed);
    let noise = NoiseModel::isotropic(k, LINEAR_SIGMA);
    let problem = InverseProblem::new(Arc::new(LinearModel::new(g.clone())), noise, data)
        .expect("dimensions are consistent by construction")
        .with_truth(truth, support);
    LinearBenchmark { matrix: g, problem }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dimensions() {
        let bench = make_linear_problem(300, 30, 4, 1);
        assert_eq!(bench.matrix.nrows(), 30);
        assert_eq!(bench.matrix.ncols(), 300);
        assert_eq!(bench.problem.data.len(), 30);
        assert_eq!(bench.problem.support.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn zero_sparsity_gives_pure_noise_data() {
        let bench = make_linear_problem(50, 10, 0, 3);
        let truth = bench.problem.truth.as_ref().unwrap();
        assert_eq!(truth, &DVector::zeros(50));
        // y = eps, nonzero with probability one
        assert!(bench.problem.data.norm() > 0.0);
    }

    #[test]
    fn wider_observation_variant_supported() {
        let bench = make_linear_problem(300, 100, 4, 5);
        assert_eq!(bench.matrix.nrows(), 100);
    }

    #[test]
    fn truth_magnitudes_in_configured_range() {
        let bench = make_linear_problem(100, 20, 6, 9);
        let truth = bench.problem.truth.as_ref().unwrap();
        for &i in bench.problem.support.as_ref().unwrap() {
            let m = truth[i].abs();
            assert!((1.0..2.0).contains(&m), "magnitude {m} outside [1, 2)");
        }
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let a = make_linear_problem(40, 10, 3, 11);
        let b = make_linear_problem(40, 10, 3, 11);
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.problem.data, b.problem.data);
        assert_eq!(a.problem.truth, b.problem.truth);
    }
}
