//! Experiment configuration: a single JSON document with strict key
//! validation, echoable into results for bit-exact reproduction.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::driver::{OuterConfig, Variant};
use crate::hyperprior::HyperParams;
use crate::kalman::{KalmanConfig, Stopping};
use crate::model::{InverseProblem, DEFAULT_THETA_FLOOR};
use crate::problems::{make_linear_problem, EllipticProblem, TransportProblem};

use super::CliError;

/// Scalar broadcast or an explicit per-component vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScalarOrVec {
    pub fn materialize(&self, dim: usize, name: &str) -> Result<DVector<f64>, CliError> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(DVector::repeat(dim, *v)),
            ScalarOrVec::Vector(v) => {
                if v.len() != dim {
                    return Err(CliError::Config(format!(
                        "{name} has {} entries but the problem dimension is {dim}",
                        v.len()
                    )));
                }
                Ok(DVector::from_vec(v.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct ProblemBlock {
    pub kind: ProblemKind,
    /// State dimension (linear problems only; the PDE problems fix their own).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Observation count (linear problems only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<usize>,
    /// Seed for problem generation (design matrix, truth, data noise).
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Linear,
    Transport,
    Elliptic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub variant: Variant,
    pub ensemble_size: usize,
    /// Inner iteration budget T.
    pub inner_iterations: usize,
    pub alpha: f64,
    /// Regularization parameter r; r > 0 selects the generalized-gamma
    /// closed-form path (requires r*beta = 3/2), r = -1 the inverse-gamma one.
    pub r: f64,
    /// Shape beta; defaults to 3/(2r) on the closed-form path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Scale parameters vartheta_i.
    #[serde(default = "default_vartheta")]
    pub vartheta: ScalarOrVec,
    /// Initial variances theta^0.
    pub theta0: ScalarOrVec,
    /// Number of regularization (theta-update) iterations; the run records
    /// outer iterations 0..=outer_iterations with 0 the vanilla solve.
    pub outer_iterations: usize,
    /// Opt-in relative-change stopping tolerance tau.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinv_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    #[serde(default)]
    pub stopping: StoppingRule,
}

fn default_vartheta() -> ScalarOrVec {
    ScalarOrVec::Scalar(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StoppingRule {
    #[default]
    Fixed,
    Morozov,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default)]
    pub record_ensembles: bool,
    #[serde(default = "default_directory")]
    pub directory: String,
    /// Which artifacts to write; subset of {"json", "csv"}.
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_directory() -> String {
    "results".to_string()
}

fn default_formats() -> Vec<String> {
    vec!["json".to_string(), "csv".to_string()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateBlock {
    /// Master seeds, one independent run each.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemBlock,
    pub solver: SolverBlock,
    #[serde(default)]
    pub output: OutputBlock,
    pub replicates: ReplicateBlock,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.solver;
        if s.ensemble_size < 2 {
            return Err(CliError::Config("ensemble_size must be at least 2".into()));
        }
        if s.inner_iterations < 1 {
            return Err(CliError::Config("inner_iterations must be at least 1".into()));
        }
        if !(s.alpha > 0.0) {
            return Err(CliError::Config("alpha must be positive".into()));
        }
        if s.r == 0.0 {
            return Err(CliError::Config("r must be nonzero".into()));
        }
        if s.r > 0.0 {
            if let Some(beta) = s.beta {
                if (s.r * beta - 1.5).abs() > 1e-12 {
                    return Err(CliError::Config(format!(
                        "closed-form path requires r*beta = 3/2, got r*beta = {}",
                        s.r * beta
                    )));
                }
            }
        } else if s.r == -1.0 {
            if s.beta.is_none() {
                return Err(CliError::Config("inverse-gamma path (r = -1) requires beta".into()));
            }
        } else {
            return Err(CliError::Config(
                "r must be positive (generalized gamma) or exactly -1 (inverse gamma)".into(),
            ));
        }
        if let Some(tau) = s.rel_tol {
            if !(tau > 0.0) {
                return Err(CliError::Config("rel_tol must be positive".into()));
            }
        }
        for f in &self.output.formats {
            if f != "json" && f != "csv" {
                return Err(CliError::Config(format!("unknown output format {f:?}")));
            }
        }
        if self.replicates.seeds.is_empty() {
            return Err(CliError::Config("replicates.seeds must not be empty".into()));
        }
        match self.problem.kind {
            ProblemKind::Linear => {
                let d = self.problem.dim.unwrap_or(300);
                let sparsity = self.problem.sparsity.unwrap_or(4);
                if sparsity > d {
                    return Err(CliError::Config("sparsity cannot exceed dim".into()));
                }
            }
            ProblemKind::Transport | ProblemKind::Elliptic => {
                if self.problem.dim.is_some()
                    || self.problem.observations.is_some()
                    || self.problem.sparsity.is_some()
                {
                    return Err(CliError::Config(
                        "transport/elliptic problems have fixed dimensions; remove dim/observations/sparsity"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Instantiate the benchmark problem named by the problem block.
    pub fn build_problem(&self) -> InverseProblem {
        match self.problem.kind {
            ProblemKind::Linear => {
                let d = self.problem.dim.unwrap_or(300);
                let k = self.problem.observations.unwrap_or(30);
                let sparsity = self.problem.sparsity.unwrap_or(4);
                make_linear_problem(d, k, sparsity, self.problem.seed).problem
            }
            ProblemKind::Transport => TransportProblem::new(self.problem.seed).problem,
            ProblemKind::Elliptic => EllipticProblem::new(self.problem.seed).problem,
        }
    }

    /// Assemble the driver configuration for a problem of dimension `dim`.
    pub fn build_outer_config(&self, dim: usize) -> Result<OuterConfig, CliError> {
        let s = &self.solver;
        let vartheta = s.vartheta.materialize(dim, "vartheta")?;
        let theta0 = s.theta0.materialize(dim, "theta0")?;
        if theta0.iter().any(|&t| !(t > 0.0)) {
            return Err(CliError::Config("theta0 entries must be positive".into()));
        }
        let hp = if s.r > 0.0 {
            HyperParams::gengamma(s.r, vartheta)
        } else {
            HyperParams::inv_gamma(s.beta.expect("validated"), vartheta)
        };
        let mut inner = KalmanConfig::new(s.alpha, s.inner_iterations);
        if let Some(tol) = s.pinv_tol {
            inner.pinv_tol = tol;
        }
        inner.stopping = match s.stopping {
            StoppingRule::Fixed => Stopping::FixedCount,
            StoppingRule::Morozov => Stopping::Morozov,
        };
        let mut cfg = OuterConfig::new(
            inner,
            hp,
            theta0,
            s.outer_iterations + 1,
            s.variant,
            s.ensemble_size,
        );
        cfg.rel_tol = s.rel_tol;
        cfg.floor = s.floor.unwrap_or(DEFAULT_THETA_FLOOR);
        cfg.record_ensembles = self.output.record_ensembles;
        Ok(cfg)
    }
}

/// Bundled experiment configurations reproducing the benchmark studies.
pub fn bundled_config(name: &str) -> Option<&'static str> {
    match name {
        "linear_fig1" => Some(include_str!("../../../../configs/linear_fig1.json")),
        "transport_tables" => Some(include_str!("../../../../configs/transport_tables.json")),
        "elliptic_tables" => Some(include_str!("../../../../configs/elliptic_tables.json")),
        _ => None,
    }
}
