//! The two inner solvers: the iterative ensemble Kalman filter (IEKF) and
//! its statistically linearized variant (IEKF-SL).
//!
//! IEKF freezes the empirical covariance of the initial ensemble in its gain
//! and anchors members to their initial draws, which keeps every iterate in
//! the affine span of the initial ensemble. IEKF-SL builds the gain from the
//! prior covariance and redraws perturbed prior means each step; its
//! stationary ensemble approximates the Gaussian posterior for linear maps.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::ensemble::{stat_lin_from_factors, statistical_linearization, Ensemble};
use crate::error::CoreError;
use crate::linalg::DEFAULT_PINV_TOL;
use crate::model::{InverseProblem, NoiseModel, Prior};
use crate::rng::{stream_rng, Purpose, StreamKey};

#[derive(Debug, Error)]
pub enum KalmanError {
    #[error("forward map produced a non-finite value for member {member} at iteration {iteration}")]
    ForwardEvaluation { member: usize, iteration: usize },
    #[error("innovation matrix is not invertible; noise covariance is ill-posed")]
    IllPosedInnovation,
    #[error("ensemble diverged (non-finite state) at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// When the inner iteration stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stopping {
    /// Run exactly `max_iterations` steps (the default; experiments report
    /// fixed iteration counts).
    FixedCount,
    /// Stop once |y - G(m_t)| falls to sqrt(tr Gamma), capped at
    /// `max_iterations`.
    Morozov,
}

/// Inner-solver configuration.
#[derive(Debug, Clone)]
pub struct KalmanConfig {
    /// Step size alpha; constant throughout the run.
    pub alpha: f64,
    /// Iteration budget T.
    pub max_iterations: usize,
    pub stopping: Stopping,
    /// Relative truncation for the statistical-linearization pseudoinverse.
    pub pinv_tol: f64,
    /// Test hook: force y_t = y and m_t = 0 so algebraic identities can be
    /// asserted exactly. Production paths leave this false.
    pub zero_perturbations: bool,
    /// Record per-step gains and linearizations (tests only; heavy).
    pub record_diagnostics: bool,
}

impl KalmanConfig {
    pub fn new(alpha: f64, max_iterations: usize) -> Self {
        assert!(alpha > 0.0, "step size must be positive");
        assert!(max_iterations >= 1, "need at least one iteration");
        if alpha > 1.0 {
            log::warn!("step size alpha = {alpha} > 1 is outside the stable range");
        }
        Self {
            alpha,
            max_iterations,
            stopping: Stopping::FixedCount,
            pinv_tol: DEFAULT_PINV_TOL,
            zero_perturbations: false,
            record_diagnostics: false,
        }
    }

    pub fn with_stopping(mut self, stopping: Stopping) -> Self {
        self.stopping = stopping;
        self
    }
}

/// Seed scope of one inner run: all streams drawn inside use the same master
/// seed and outer index, with (inner, member) varying.
#[derive(Debug, Clone, Copy)]
pub struct SeedContext {
    pub master_seed: u64,
    pub outer: u32,
}

impl SeedContext {
    pub fn new(master_seed: u64, outer: u32) -> Self {
        Self { master_seed, outer }
    }

    fn rng(&self, purpose: Purpose, inner: u32, member: u32) -> rand_chacha::ChaCha8Rng {
        stream_rng(self.master_seed, StreamKey::new(purpose, self.outer, inner, member))
    }
}

/// Per-step matrices kept for regression tests.
#[derive(Debug, Clone)]
pub struct InnerDiagnostics {
    /// Empirical covariance of the initial ensemble (1/N convention).
    pub initial_covariance: DMatrix<f64>,
    /// Kalman gain used at each executed step.
    pub gains: Vec<DMatrix<f64>>,
    /// Statistical linearization G^N at each executed step.
    pub linearizations: Vec<DMatrix<f64>>,
}

/// Output of one inner run.
#[derive(Debug, Clone)]
pub struct InnerRunResult {
    /// Empirical mean of the final ensemble.
    pub final_mean: DVector<f64>,
    pub final_ensemble: Ensemble,
    /// Update steps actually executed.
    pub iterations_used: usize,
    /// |y - G(m_t)| for t = 0..iterations_used (length iterations_used + 1).
    pub misfit_trace: Vec<f64>,
    pub diagnostics: Option<InnerDiagnostics>,
}

/// Morozov discrepancy check: |y - G(m_t)| <= sqrt(tr Gamma), boundary
/// inclusive.
pub fn morozov_check(y: &DVector<f64>, g_of_mean: &DVector<f64>, noise: &NoiseModel) -> bool {
    (y - g_of_mean).norm() <= noise.trace().sqrt()
}

enum Variant {
    Iekf,
    IekfSl,
}

/// Run IEKF: frozen initial-ensemble covariance in the gain, members anchored
/// to their initial draws, data perturbations y_t ~ N(y, alpha^{-1} Gamma).
pub fn iekf_run(
    problem: &InverseProblem,
    prior: &Prior,
    cfg: &KalmanConfig,
    ctx: SeedContext,
    ensemble_size: usize,
) -> Result<InnerRunResult, KalmanError> {
    run_inner(problem, prior, cfg, ctx, ensemble_size, Variant::Iekf)
}

/// Run IEKF-SL: prior covariance in the gain, perturbations on both the data
/// (y_t ~ N(y, 2 alpha^{-1} Gamma)) and the prior mean
/// (m_t ~ N(0, 2 alpha^{-1} P)).
pub fn iekfsl_run(
    problem: &InverseProblem,
    prior: &Prior,
    cfg: &KalmanConfig,
    ctx: SeedContext,
    ensemble_size: usize,
) -> Result<InnerRunResult, KalmanError> {
    run_inner(problem, prior, cfg, ctx, ensemble_size, Variant::IekfSl)
}

fn run_inner(
    problem: &InverseProblem,
    prior: &Prior,
    cfg: &KalmanConfig,
    ctx: SeedContext,
    ensemble_size: usize,
    variant: Variant,
) -> Result<InnerRunResult, KalmanError> {
    let d = problem.input_dim();
    let n = ensemble_size;
    assert!(n >= 2, "ensemble size must be at least 2");
    assert_eq!(prior.dim(), d, "prior dimension must match the state dimension");

    // Initial ensemble u_0 ~ N(0, P), one stream per member.
    let mut members: Vec<DVector<f64>> = (0..n)
        .map(|j| {
            let mut rng = ctx.rng(Purpose::InitialEnsemble, 0, j as u32);
            prior.sample(1.0, &mut rng)
        })
        .collect();
    let anchors: Option<Vec<DVector<f64>>> = match variant {
        Variant::Iekf => Some(members.clone()),
        Variant::IekfSl => None,
    };

    // Centered factor of the initial ensemble; the IEKF gain keeps using it
    // at every step.
    let initial_centered = centered_factor(&members);
    let inv_n = 1.0 / n as f64;

    let mut diagnostics = cfg.record_diagnostics.then(|| InnerDiagnostics {
        initial_covariance: &initial_centered * initial_centered.transpose() * inv_n,
        gains: Vec::new(),
        linearizations: Vec::new(),
    });

    let mut mean = ensemble_mean(&members);
    let mut misfit_trace = vec![mean_misfit(problem, &mean, 0)?];
    let mut iterations_used = 0;
    let morozov_level = problem.noise.trace().sqrt();

    if !(cfg.stopping == Stopping::Morozov && misfit_trace[0] <= morozov_level) {
        for t in 0..cfg.max_iterations {
            let outputs = evaluate_ensemble(problem, &members, t)?;

            // Statistical linearization from centered factors; the Gram route
            // keeps the eigendecomposition at size min(N, d).
            let uc = centered_factor(&members);
            let gc = centered_outputs(&outputs);
            let gn = if n <= d {
                stat_lin_from_factors(&uc, &gc, cfg.pinv_tol)
            } else {
                let puu = &uc * uc.transpose() * inv_n;
                let puy = &uc * gc.transpose() * inv_n;
                statistical_linearization(&puy, &puu, cfg.pinv_tol)
            };

            // b = P* GN^T with P* the frozen P_0^uu (IEKF) or the prior (IEKF-SL).
            let b = match variant {
                Variant::Iekf => &initial_centered * (initial_centered.transpose() * gn.transpose()) * inv_n,
                Variant::IekfSl => prior.mul_transposed(&gn),
            };
            let m = &gn * &b;
            let s = (&m + m.transpose()) * 0.5 + problem.noise.gamma();
            let gain = crate::linalg::innovation_solve(&s, &b.transpose())
                .ok_or(KalmanError::IllPosedInnovation)?
                .transpose();

            if let Some(diag) = diagnostics.as_mut() {
                diag.gains.push(gain.clone());
                diag.linearizations.push(gn.clone());
            }

            let alpha = cfg.alpha;
            let data_scale = match variant {
                Variant::Iekf => 1.0 / alpha,
                Variant::IekfSl => 2.0 / alpha,
            };
            members = members
                .par_iter()
                .enumerate()
                .map(|(j, u)| {
                    let perturbed_data = if cfg.zero_perturbations {
                        problem.data.clone()
                    } else {
                        let mut rng = ctx.rng(Purpose::DataPerturbation, t as u32, j as u32);
                        problem.noise.sample_around(&problem.data, data_scale, &mut rng)
                    };
                    let anchor = match (&variant, &anchors) {
                        (Variant::Iekf, Some(a)) => a[j].clone(),
                        _ => {
                            if cfg.zero_perturbations {
                                DVector::zeros(d)
                            } else {
                                let mut rng =
                                    ctx.rng(Purpose::PriorPerturbation, t as u32, j as u32);
                                prior.sample(2.0 / alpha, &mut rng)
                            }
                        }
                    };
                    let residual = perturbed_data - &outputs[j];
                    let pull = anchor - u;
                    let innovation = residual - &gn * &pull;
                    u + alpha * (&gain * innovation + pull)
                })
                .collect();

            iterations_used = t + 1;
            if members.iter().any(|u| !u.iter().all(|x| x.is_finite())) {
                return Err(KalmanError::Diverged { iteration: iterations_used });
            }
            mean = ensemble_mean(&members);
            misfit_trace.push(mean_misfit(problem, &mean, iterations_used)?);
            if cfg.stopping == Stopping::Morozov
                && misfit_trace[iterations_used] <= morozov_level
            {
                break;
            }
        }
    }

    let final_ensemble = Ensemble::new(members)?;
    Ok(InnerRunResult {
        final_mean: mean,
        final_ensemble,
        iterations_used,
        misfit_trace,
        diagnostics,
    })
}

fn ensemble_mean(members: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(members[0].len());
    for m in members {
        acc += m;
    }
    acc / members.len() as f64
}

fn centered_factor(members: &[DVector<f64>]) -> DMatrix<f64> {
    let mean = ensemble_mean(members);
    let mut out = DMatrix::zeros(members[0].len(), members.len());
    for (j, u) in members.iter().enumerate() {
        out.set_column(j, &(u - &mean));
    }
    out
}

fn centered_outputs(outputs: &[DVector<f64>]) -> DMatrix<f64> {
    let mut mean = DVector::zeros(outputs[0].len());
    for g in outputs {
        mean += g;
    }
    mean /= outputs.len() as f64;
    let mut out = DMatrix::zeros(outputs[0].len(), outputs.len());
    for (j, g) in outputs.iter().enumerate() {
        out.set_column(j, &(g - &mean));
    }
    out
}

fn evaluate_ensemble(
    problem: &InverseProblem,
    members: &[DVector<f64>],
    iteration: usize,
) -> Result<Vec<DVector<f64>>, KalmanError> {
    let outputs: Vec<DVector<f64>> =
        members.par_iter().map(|u| problem.forward.apply(u)).collect();
    for (j, g) in outputs.iter().enumerate() {
        if !g.iter().all(|x| x.is_finite()) {
            return Err(KalmanError::ForwardEvaluation { member: j, iteration });
        }
    }
    Ok(outputs)
}

fn mean_misfit(
    problem: &InverseProblem,
    mean: &DVector<f64>,
    iteration: usize,
) -> Result<f64, KalmanError> {
    let misfit = problem.misfit(mean);
    if !misfit.is_finite() {
        return Err(KalmanError::Diverged { iteration });
    }
    Ok(misfit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiagCovariance, LinearModel};
    use crate::rng::standard_normal_vector;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn linear_problem(d: usize, k: usize, seed: u64) -> (InverseProblem, DMatrix<f64>) {
        let mut rng = stream_rng(seed, StreamKey::new(Purpose::Generic, 0, 0, 0));
        let g = DMatrix::from_fn(k, d, |_, _| standard_normal_vector(&mut rng, 1)[0]);
        let truth = standard_normal_vector(&mut rng, d);
        let y = &g * &truth;
        let noise = NoiseModel::isotropic(k, 0.1);
        let problem =
            InverseProblem::new(Arc::new(LinearModel::new(g.clone())), noise, y).unwrap();
        (problem, g)
    }

    fn identity_prior(d: usize, scale: f64) -> Prior {
        Prior::Diagonal(DiagCovariance::with_default_floor(DVector::repeat(d, scale)).unwrap())
    }

    #[test]
    fn morozov_examples() {
        let noise = NoiseModel::isotropic(4, 1.0);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert!(morozov_check(&y, &y, &noise));
        // |residual| = sqrt(k) exactly: boundary inclusive
        let g = &y - DVector::repeat(4, 1.0);
        assert!(morozov_check(&y, &g, &noise));
        // linear benchmark noise level: Gamma = 0.01 I_30 -> sqrt(0.3)
        let noise = NoiseModel::isotropic(30, 0.1);
        assert_relative_eq!(noise.trace().sqrt(), 0.3_f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn one_step_mean_matches_kalman_formula() {
        // alpha = 1, perturbations zeroed: m_1 = m_0 + K (y - g_mean), with K
        // built from the empirical quantities of the initial ensemble.
        let (problem, _) = linear_problem(4, 3, 5);
        let prior = identity_prior(4, 1.0);
        let mut cfg = KalmanConfig::new(1.0, 1);
        cfg.zero_perturbations = true;
        cfg.record_diagnostics = true;
        let ctx = SeedContext::new(99, 0);
        let n = 12;
        let result = iekf_run(&problem, &prior, &cfg, ctx, n).unwrap();

        // reproduce the initial ensemble from the same streams
        let members: Vec<DVector<f64>> = (0..n)
            .map(|j| {
                let mut rng =
                    stream_rng(99, StreamKey::new(Purpose::InitialEnsemble, 0, 0, j as u32));
                prior.sample(1.0, &mut rng)
            })
            .collect();
        let e = Ensemble::new(members.clone()).unwrap();
        let outputs: Vec<DVector<f64>> =
            members.iter().map(|u| problem.forward.apply(u)).collect();
        let stats = crate::ensemble::ensemble_stats(&e, &outputs).unwrap();
        let gn = statistical_linearization(&stats.puy, &stats.puu, DEFAULT_PINV_TOL);
        let b = &stats.puu * gn.transpose();
        let s = &gn * &b + problem.noise.gamma();
        let k_gain = s.cholesky().unwrap().solve(&b.transpose()).transpose();

        // with zeroed perturbations and alpha = 1 each member moves by
        // K (y - G u_0), so the mean moves by K (y - g_mean)
        let expected = &stats.mean + &k_gain * (&problem.data - &stats.output_mean);
        assert!((&result.final_mean - &expected).norm() <= 1e-8 * expected.norm().max(1.0));
    }

    #[test]
    fn iekf_gain_frozen_at_initial_covariance() {
        // Linear forward map with N > d makes G^N = G at every step, so the
        // gain must be constant; recomputing it from the stored P_0^uu must
        // reproduce the step-5 gain.
        let (problem, _) = linear_problem(3, 2, 7);
        let prior = identity_prior(3, 1.0);
        let mut cfg = KalmanConfig::new(0.5, 6);
        cfg.record_diagnostics = true;
        let result = iekf_run(&problem, &prior, &cfg, SeedContext::new(13, 0), 10).unwrap();
        let diag = result.diagnostics.unwrap();
        assert_eq!(diag.gains.len(), 6);

        let gn5 = &diag.linearizations[5];
        let b = &diag.initial_covariance * gn5.transpose();
        let s = gn5 * &b + problem.noise.gamma();
        let recomputed = s.cholesky().unwrap().solve(&b.transpose()).transpose();
        assert!((&diag.gains[5] - &recomputed).norm() <= 1e-10 * recomputed.norm());
        assert!((&diag.gains[5] - &diag.gains[0]).norm() <= 1e-8 * diag.gains[0].norm());
    }

    #[test]
    fn misfit_trace_finite_and_sized() {
        let (problem, _) = linear_problem(5, 4, 11);
        let prior = identity_prior(5, 0.5);
        let cfg = KalmanConfig::new(0.5, 8);
        let result = iekfsl_run(&problem, &prior, &cfg, SeedContext::new(3, 0), 20).unwrap();
        assert_eq!(result.iterations_used, 8);
        assert_eq!(result.misfit_trace.len(), 9);
        assert!(result.misfit_trace.iter().all(|m| m.is_finite()));
    }

    #[test]
    fn final_mean_is_ensemble_mean() {
        let (problem, _) = linear_problem(4, 2, 17);
        let prior = identity_prior(4, 1.0);
        let cfg = KalmanConfig::new(0.5, 3);
        let result = iekf_run(&problem, &prior, &cfg, SeedContext::new(29, 0), 8).unwrap();
        let mean = result.final_ensemble.mean();
        assert!((mean - &result.final_mean).norm() <= 1e-12);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let (problem, _) = linear_problem(6, 4, 19);
        let prior = identity_prior(6, 1.0);
        let cfg = KalmanConfig::new(0.5, 5);
        let run = || {
            iekfsl_run(&problem, &prior, &cfg, SeedContext::new(101, 2), 16)
                .unwrap()
                .final_mean
        };
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool8 = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let serial = pool1.install(run);
        let parallel = pool8.install(run);
        assert_eq!(serial, parallel, "results must be bit-identical across thread counts");
    }

    #[test]
    fn zero_map_stationary_mean_near_zero() {
        // G = 0, y = 0: the update is an AR(1) pull toward perturbed prior
        // means with zero mean.
        let d = 8;
        let g = DMatrix::zeros(4, d);
        let noise = NoiseModel::isotropic(4, 1.0);
        let problem =
            InverseProblem::new(Arc::new(LinearModel::new(g)), noise, DVector::zeros(4)).unwrap();
        let prior = identity_prior(d, 1.0);
        let cfg = KalmanConfig::new(0.5, 150);
        let result = iekfsl_run(&problem, &prior, &cfg, SeedContext::new(7, 0), 400).unwrap();
        // members are i.i.d. with stationary variance 2/(2 - alpha); the mean
        // of 400 draws stays within a few standard errors
        let std_err = (2.0 / (2.0 - 0.5) / 400.0_f64).sqrt();
        assert!(
            result.final_mean.amax() < 5.0 * std_err,
            "stationary mean {} too far from zero",
            result.final_mean.amax()
        );
    }

    #[test]
    fn morozov_stops_early() {
        let (problem, _) = linear_problem(4, 3, 23);
        let prior = identity_prior(4, 1.0);
        let cfg = KalmanConfig::new(1.0, 50).with_stopping(Stopping::Morozov);
        let result = iekf_run(&problem, &prior, &cfg, SeedContext::new(31, 0), 200).unwrap();
        assert!(result.iterations_used < 50, "expected an early stop");
        let final_misfit = *result.misfit_trace.last().unwrap();
        assert!(final_misfit <= problem.noise.trace().sqrt());
    }

    #[test]
    fn iekf_members_stay_in_initial_span() {
        // d = 20, N = 5: project members onto the affine span of the initial
        // ensemble; IEKF must stay, IEKF-SL must leave.
        let (problem, _) = linear_problem(20, 10, 37);
        let prior = identity_prior(20, 1.0);
        let cfg = KalmanConfig::new(0.5, 8);
        let n = 5usize;

        let seeds = SeedContext::new(71, 0);
        let initial: Vec<DVector<f64>> = (0..n)
            .map(|j| {
                let mut rng =
                    stream_rng(71, StreamKey::new(Purpose::InitialEnsemble, 0, 0, j as u32));
                prior.sample(1.0, &mut rng)
            })
            .collect();
        let mean = ensemble_mean(&initial);
        let centered = centered_factor(&initial);
        let qr = centered.qr();
        let q = qr.q();

        let span_residual = |u: &DVector<f64>| {
            let x = u - &mean;
            let proj = &q * (q.transpose() * &x);
            (x - proj).norm() / u.norm().max(1e-30)
        };

        let iekf = iekf_run(&problem, &prior, &cfg, seeds, n).unwrap();
        for member in iekf.final_ensemble.members() {
            assert!(span_residual(member) <= 1e-8);
        }

        let iekfsl = iekfsl_run(&problem, &prior, &cfg, seeds, n).unwrap();
        let max_residual = iekfsl
            .final_ensemble
            .members()
            .iter()
            .map(|m| span_residual(m))
            .fold(0.0_f64, f64::max);
        assert!(max_residual > 1e-3, "IEKF-SL unexpectedly stayed in the span");
    }
}
