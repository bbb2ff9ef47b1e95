//! The three synthetic benchmark inverse problems: an underdetermined linear
//! system, a transport PDE with closed-form forward map, and a 2D elliptic
//! problem discretized with a five-point stencil.

mod elliptic;
mod linear;
mod transport;

pub use elliptic::{make_elliptic_truth, EllipticModel, EllipticProblem, EllipticSystem};
pub use linear::{make_linear_problem, LinearBenchmark};
pub use transport::{make_transport_truth, TransportModel, TransportProblem};

use nalgebra::DVector;

use crate::rng::{standard_normal_vector, stream_rng, Purpose, StreamKey};

/// Observations y = clean + eps with eps ~ N(0, sigma^2 I), drawn from the
/// problem-noise stream of `master_seed`.
pub fn noisy_data(clean: &DVector<f64>, sigma: f64, master_seed: u64) -> DVector<f64> {
    let mut rng = stream_rng(master_seed, StreamKey::new(Purpose::ProblemNoise, 0, 0, 0));
    let z = standard_normal_vector(&mut rng, clean.len());
    clean + sigma * z
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_returns_clean_signal() {
        let clean = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        assert_eq!(noisy_data(&clean, 0.0, 42), clean);
    }

    #[test]
    fn different_seeds_different_noise() {
        let clean = DVector::zeros(10);
        let a = noisy_data(&clean, 0.1, 1);
        let b = noisy_data(&clean, 0.1, 2);
        assert_ne!(a, b);
        assert_eq!(a, noisy_data(&clean, 0.1, 1));
    }

    #[test]
    fn empirical_noise_variance() {
        // Monte Carlo: variance over replicates within 5% of sigma^2.
        let clean = DVector::zeros(30);
        let sigma = 0.1;
        let replicates = 10_000;
        let mut acc = 0.0;
        for seed in 0..replicates {
            let y = noisy_data(&clean, sigma, seed);
            acc += y.norm_squared();
        }
        let var = acc / (replicates as f64 * 30.0);
        assert!(
            (var - sigma * sigma).abs() < 0.05 * sigma * sigma,
            "empirical variance {var}"
        );
    }
}
