//! Generalized-gamma hyperparameter machinery: closed-form theta updates,
//! the joint objective J(u, theta) and its reduced lp form, and the
//! convexity certificate.

use nalgebra::DVector;
use thiserror::Error;

use crate::model::InverseProblem;

#[derive(Debug, Error)]
pub enum HyperError {
    #[error("closed-form generalized-gamma update requires r*beta = 3/2 and r > 0 (r = {r}, beta = {beta})")]
    GenGammaPrecondition { r: f64, beta: f64 },
    #[error("inverse-gamma update requires r = -1 (r = {0})")]
    InvGammaPrecondition(f64),
    #[error("penalty form requires r > 0 (r = {0})")]
    PenaltyRequiresPositiveR(f64),
    #[error("theta[{index}] = {value} must be positive here")]
    NonPositiveTheta { index: usize, value: f64 },
    #[error("hyperparameter dimension {found} does not match state dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Hyperprior parameters (r, beta, vartheta) with the derived sparsity level
/// eta = r*beta - 3/2.
#[derive(Debug, Clone)]
pub struct HyperParams {
    pub r: f64,
    pub beta: f64,
    pub vartheta: DVector<f64>,
    pub eta: f64,
}

impl HyperParams {
    /// General constructor; eta is derived.
    pub fn new(r: f64, beta: f64, vartheta: DVector<f64>) -> Self {
        assert!(r != 0.0, "r must be nonzero");
        assert!(beta > 0.0, "beta must be positive");
        assert!(vartheta.iter().all(|&v| v > 0.0), "vartheta must be positive");
        let eta = r * beta - 1.5;
        Self { r, beta, vartheta, eta }
    }

    /// Parameters on the closed-form manifold r*beta = 3/2, eta = 0 exactly.
    pub fn gengamma(r: f64, vartheta: DVector<f64>) -> Self {
        assert!(r > 0.0, "closed-form path requires r > 0");
        let mut hp = Self::new(r, 1.5 / r, vartheta);
        hp.eta = 0.0;
        hp
    }

    /// Inverse-gamma hyperprior (r = -1) with shape beta.
    pub fn inv_gamma(beta: f64, vartheta: DVector<f64>) -> Self {
        Self::new(-1.0, beta, vartheta)
    }

    pub fn dim(&self) -> usize {
        self.vartheta.len()
    }
}

/// The effective lp penalty induced along the closed-form manifold:
/// p = 2r/(r+1), C_r = (r+1)/(2r)^{r/(r+1)}, w_i = vartheta_i^{-1/(r+1)}.
#[derive(Debug, Clone)]
pub struct PenaltySpec {
    pub p: f64,
    pub c_r: f64,
    pub weights: DVector<f64>,
    /// Exponent of |u_i| in the theta update, 2/(r+1). Distinct from `p`:
    /// both appear in the source formulas under the same letter.
    pub theta_exponent: f64,
}

impl PenaltySpec {
    pub fn from_hyper(hp: &HyperParams) -> Result<Self, HyperError> {
        if hp.r <= 0.0 {
            return Err(HyperError::PenaltyRequiresPositiveR(hp.r));
        }
        let r = hp.r;
        let p = 2.0 * r / (r + 1.0);
        let c_r = (r + 1.0) / (2.0 * r).powf(r / (r + 1.0));
        let weights = hp.vartheta.map(|v| v.powf(-1.0 / (r + 1.0)));
        Ok(Self { p, c_r, weights, theta_exponent: 2.0 / (r + 1.0) })
    }
}

fn check_dims(hp: &HyperParams, d: usize) -> Result<(), HyperError> {
    if hp.dim() != d {
        return Err(HyperError::DimensionMismatch { expected: d, found: hp.dim() });
    }
    Ok(())
}

/// Closed-form theta update on the manifold r*beta = 3/2:
/// theta_i = vartheta_i^{1/(r+1)} / (2r)^{1/(r+1)} * |u_i|^{2/(r+1)}.
///
/// Returns exact zeros where u_i = 0; the variance floor is applied
/// downstream by `DiagCovariance`, not here.
pub fn theta_update_gengamma(u: &DVector<f64>, hp: &HyperParams) -> Result<DVector<f64>, HyperError> {
    if hp.eta != 0.0 || hp.r <= 0.0 {
        return Err(HyperError::GenGammaPrecondition { r: hp.r, beta: hp.beta });
    }
    check_dims(hp, u.len())?;
    let r = hp.r;
    let inv_rp1 = 1.0 / (r + 1.0);
    let scale = (2.0 * r).powf(inv_rp1);
    let exponent = 2.0 * inv_rp1;
    let theta = DVector::from_iterator(
        u.len(),
        u.iter().zip(hp.vartheta.iter()).map(|(&ui, &vi)| {
            if ui == 0.0 {
                0.0
            } else {
                vi.powf(inv_rp1) / scale * ui.abs().powf(exponent)
            }
        }),
    );
    Ok(theta)
}

/// Inverse-gamma (r = -1) update: theta_i = (u_i^2/2 + 1/vartheta_i) / (beta + 3/2).
pub fn theta_update_invgamma(u: &DVector<f64>, hp: &HyperParams) -> Result<DVector<f64>, HyperError> {
    if hp.r != -1.0 {
        return Err(HyperError::InvGammaPrecondition(hp.r));
    }
    check_dims(hp, u.len())?;
    let denom = hp.beta + 1.5;
    let theta = DVector::from_iterator(
        u.len(),
        u.iter()
            .zip(hp.vartheta.iter())
            .map(|(&ui, &vi)| (ui * ui / 2.0 + 1.0 / vi) / denom),
    );
    Ok(theta)
}

/// Joint objective
/// J(u, theta) = 1/2 |y - G(u)|^2_Gamma + 1/2 sum u_i^2/theta_i
///             - eta * sum log(theta_i/vartheta_i) + sum theta_i^r/vartheta_i.
///
/// theta_i must be positive, except that (theta_i = 0, u_i = 0) is accepted
/// on the eta = 0, r > 0 path where the limit contribution is zero.
pub fn objective_j(
    u: &DVector<f64>,
    theta: &DVector<f64>,
    problem: &InverseProblem,
    hp: &HyperParams,
) -> Result<f64, HyperError> {
    check_dims(hp, u.len())?;
    if theta.len() != u.len() {
        return Err(HyperError::DimensionMismatch { expected: u.len(), found: theta.len() });
    }
    let residual = &problem.data - problem.forward.apply(u);
    let mut value = 0.5 * problem.noise.mahalanobis_sq(&residual);
    for i in 0..u.len() {
        let (ti, ui, vi) = (theta[i], u[i], hp.vartheta[i]);
        if ti > 0.0 {
            value += 0.5 * ui * ui / ti;
            value -= hp.eta * (ti / vi).ln();
            value += ti.powf(hp.r) / vi;
        } else if ti == 0.0 && ui == 0.0 && hp.eta == 0.0 && hp.r > 0.0 {
            // limit convention along the closed-form manifold: contributes 0
        } else {
            return Err(HyperError::NonPositiveTheta { index: i, value: ti });
        }
    }
    Ok(value)
}

/// Reduced objective J_p(u) = 1/2 |y - G(u)|^2_Gamma + C_r sum w_i |u_i|^p.
pub fn objective_jp(
    u: &DVector<f64>,
    problem: &InverseProblem,
    hp: &HyperParams,
) -> Result<f64, HyperError> {
    check_dims(hp, u.len())?;
    let spec = PenaltySpec::from_hyper(hp)?;
    let residual = &problem.data - problem.forward.apply(u);
    let mut value = 0.5 * problem.noise.mahalanobis_sq(&residual);
    for i in 0..u.len() {
        if u[i] != 0.0 {
            value += spec.c_r * spec.weights[i] * u[i].abs().powf(spec.p);
        }
    }
    Ok(value)
}

/// Convexity certificate for J(u, theta).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvexityBound {
    /// Convex everywhere (r >= 1 or r <= 0, with eta >= 0).
    Everywhere,
    /// Convex where theta_i/vartheta_i <= bound for all i.
    PerComponent(f64),
    /// eta < 0: no convexity guarantee.
    NoGuarantee,
}

impl ConvexityBound {
    /// Upper bound on theta_i/vartheta_i; +inf when convex everywhere.
    pub fn as_ratio_bound(&self) -> Option<f64> {
        match self {
            ConvexityBound::Everywhere => Some(f64::INFINITY),
            ConvexityBound::PerComponent(b) => Some(*b),
            ConvexityBound::NoGuarantee => None,
        }
    }
}

/// Region of theta where J(u, theta) is convex (given PSD forward-map
/// curvature): everywhere for r >= 1 or r <= 0, and
/// theta_i/vartheta_i <= (eta/(r(1-r)))^{1/r} for 0 < r < 1.
pub fn convexity_bound(hp: &HyperParams) -> ConvexityBound {
    if hp.eta < 0.0 {
        return ConvexityBound::NoGuarantee;
    }
    if hp.r >= 1.0 || hp.r <= 0.0 {
        return ConvexityBound::Everywhere;
    }
    let r = hp.r;
    ConvexityBound::PerComponent((hp.eta / (r * (1.0 - r))).powf(1.0 / r))
}

/// Quadratic form q^T H q of the Hessian of J at (u, theta) in the direction
/// q = (v, w), in the completed-square arrangement:
///
///   |Jac(u) v|^2_Gamma + sum_i G_i(u) (v^T D2G_i v)
///   + sum_i (1/theta_i) (v_i - u_i w_i / theta_i)^2
///   + sum_i ( r(r-1) theta_i^{r-2} / vartheta_i + eta / theta_i^2 ) w_i^2.
///
/// The misfit term carries the Gamma weight and the generalized-gamma term is
/// the second derivative of theta^r/vartheta, so the value agrees with finite
/// differences of J for any hyperparameters. Models without closed-form
/// derivatives fall back to central differences of the forward map.
pub fn hessian_quadform(
    u: &DVector<f64>,
    theta: &DVector<f64>,
    v: &DVector<f64>,
    w: &DVector<f64>,
    problem: &InverseProblem,
    hp: &HyperParams,
) -> Result<f64, HyperError> {
    check_dims(hp, u.len())?;
    for i in 0..theta.len() {
        if theta[i] <= 0.0 {
            return Err(HyperError::NonPositiveTheta { index: i, value: theta[i] });
        }
    }
    let g_u = problem.forward.apply(u);

    // Directional Jacobian action Jac(u) v.
    let jv = match problem.forward.jacobian(u) {
        Some(jac) => &jac * v,
        None => fd_directional_derivative(problem, u, v),
    };
    let mut value = problem.noise.mahalanobis_sq(&jv);

    // Forward-map curvature term sum_i G_i(u) * v^T D2G_i(u) v.
    let d2 = match problem.forward.second_directional_derivative(u, v) {
        Some(d2) => d2,
        None => fd_second_directional(problem, u, v),
    };
    value += g_u.dot(&d2);

    let r = hp.r;
    for i in 0..u.len() {
        let (ti, ui, vi) = (theta[i], u[i], hp.vartheta[i]);
        let s = v[i] - ui * w[i] / ti;
        value += s * s / ti;
        value += (r * (r - 1.0) * ti.powf(r - 2.0) / vi + hp.eta / (ti * ti)) * w[i] * w[i];
    }
    Ok(value)
}

fn fd_directional_derivative(
    problem: &InverseProblem,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    let h = 1e-6 * (1.0 + u.norm()) / (1.0 + v.norm());
    let plus = problem.forward.apply(&(u + v * h));
    let minus = problem.forward.apply(&(u - v * h));
    (plus - minus) / (2.0 * h)
}

fn fd_second_directional(
    problem: &InverseProblem,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    let h = 1e-4 * (1.0 + u.norm()) / (1.0 + v.norm());
    let plus = problem.forward.apply(&(u + v * h));
    let minus = problem.forward.apply(&(u - v * h));
    let center = problem.forward.apply(u);
    (plus + minus - 2.0 * center) / (h * h)
}

/// Scalar objective minimized by the theta update for one component:
/// u^2/(2 theta) - eta log(theta/vartheta) + theta^r/vartheta.
pub fn theta_component_objective(theta: f64, u: f64, vartheta: f64, hp: &HyperParams) -> f64 {
    u * u / (2.0 * theta) - hp.eta * (theta / vartheta).ln() + theta.powf(hp.r) / vartheta
}
