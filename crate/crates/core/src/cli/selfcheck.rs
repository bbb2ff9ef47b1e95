//! `selfcheck` subcommand: the fast oracle suite. Each check pits an
//! implementation against an independent computation and fails loudly on any
//! disagreement.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::hyperprior::{
    objective_j, objective_jp, theta_component_objective, theta_update_gengamma, HyperError,
    HyperParams,
};
use crate::linalg::{pseudoinverse, DEFAULT_PINV_TOL};
use crate::problems::{make_elliptic_truth, make_linear_problem, EllipticModel, TransportModel};
use crate::rng::{standard_normal_vector, stream_rng, Purpose, StreamKey};

type ThetaUpdate = dyn Fn(&DVector<f64>, &HyperParams) -> Result<DVector<f64>, HyperError>;

/// Execute the `selfcheck` subcommand; 0 when every oracle passes, 3 otherwise.
pub fn cmd_selfcheck() -> i32 {
    let checks: Vec<(&str, Box<dyn Fn() -> Result<(), String>>)> = vec![
        ("theta-update vs golden-section", Box::new(|| theta_update_check(&theta_update_gengamma))),
        ("joint objective equals lp objective on the manifold", Box::new(manifold_identity_check)),
        ("pseudoinverse Penrose identities", Box::new(penrose_check)),
        ("elliptic solver residual", Box::new(elliptic_residual_check)),
        ("transport finite-difference consistency", Box::new(transport_consistency_check)),
    ];
    let mut ok = true;
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                println!("FAIL {name}: {msg}");
                ok = false;
            }
        }
    }
    if ok {
        0
    } else {
        3
    }
}

/// Golden-section search over log(theta); unimodality of the component
/// objective makes the bracket safe.
pub fn golden_section_argmin(f: impl Fn(f64) -> f64, lo: f64, hi: f64, iters: usize) -> f64 {
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c.exp());
    let mut fd = f(d.exp());
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d.exp());
        }
    }
    ((a + b) / 2.0).exp()
}

/// Closed-form theta update against a golden-section argmin of the scalar
/// objective. Injectable so a corrupted update is provably caught.
pub fn theta_update_check(update: &ThetaUpdate) -> Result<(), String> {
    let mut rng = stream_rng(2024, StreamKey::new(Purpose::Generic, 0, 0, 0));
    for trial in 0..60 {
        let r = [1.0 / 3.0, 0.5, 1.0][trial % 3];
        let vartheta = rng.random_range(0.1..10.0);
        let u = rng.random_range(0.05..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let hp = HyperParams::gengamma(r, DVector::repeat(1, vartheta));
        let theta = update(&DVector::from_vec(vec![u]), &hp)
            .map_err(|e| e.to_string())?[0];
        let oracle = golden_section_argmin(
            |t| theta_component_objective(t, u, vartheta, &hp),
            1e-12,
            1e4,
            200,
        );
        let rel = (theta - oracle).abs() / oracle.abs();
        if rel > 1e-6 {
            return Err(format!(
                "update {theta} vs argmin {oracle} (rel {rel:.2e}) at r={r}, vartheta={vartheta}, u={u}"
            ));
        }
    }
    Ok(())
}

fn manifold_identity_check() -> Result<(), String> {
    let bench = make_linear_problem(10, 6, 3, 2024);
    let mut rng = stream_rng(77, StreamKey::new(Purpose::Generic, 0, 0, 1));
    for &r in &[1.0 / 3.0, 1.0] {
        let hp = HyperParams::gengamma(r, DVector::repeat(10, 1.0));
        for _ in 0..40 {
            let u = standard_normal_vector(&mut rng, 10);
            let theta = theta_update_gengamma(&u, &hp).map_err(|e| e.to_string())?;
            let j = objective_j(&u, &theta, &bench.problem, &hp).map_err(|e| e.to_string())?;
            let jp = objective_jp(&u, &bench.problem, &hp).map_err(|e| e.to_string())?;
            let diff = (j - jp).abs();
            if diff > 1e-10 * jp.abs().max(1.0) {
                return Err(format!("J = {j} vs Jp = {jp} at r = {r}"));
            }
        }
    }
    Ok(())
}

fn penrose_check() -> Result<(), String> {
    let mut rng = stream_rng(7, StreamKey::new(Purpose::Generic, 0, 0, 2));
    let a = DMatrix::from_fn(5, 3, |_, _| standard_normal_vector(&mut rng, 1)[0]);
    let p = &a * a.transpose();
    let pinv = pseudoinverse(&p, DEFAULT_PINV_TOL);
    let checks = [
        ((&p * &pinv * &p) - &p).norm() / p.norm(),
        ((&pinv * &p * &pinv) - &pinv).norm() / pinv.norm(),
        {
            let pp = &p * &pinv;
            (&pp - pp.transpose()).norm() / pp.norm()
        },
        {
            let qp = &pinv * &p;
            (&qp - qp.transpose()).norm() / qp.norm()
        },
    ];
    for (i, rel) in checks.iter().enumerate() {
        if *rel > 1e-10 {
            return Err(format!("Penrose identity {} off by {rel:.2e}", i + 1));
        }
    }
    Ok(())
}

fn elliptic_residual_check() -> Result<(), String> {
    let model = EllipticModel::new();
    let coeffs = make_elliptic_truth(1);
    let system = model.assemble(&coeffs);
    let rhs = &system.b_source + &system.b_boundary;
    let v = model.solve(&system, &rhs);
    let residual = (&system.a * &v - &rhs).norm();
    if residual > 1e-10 * rhs.norm() {
        return Err(format!("residual {residual:.3e} exceeds 1e-10 |b|"));
    }
    Ok(())
}

/// Forward-difference residual of dv/dx1 - dv/dx2 - u(x1) v on refined grids
/// must shrink like O(h). Random coefficients are confined to the low modes:
/// the asymptotic regime needs u resolved on the coarsest grid.
fn transport_consistency_check() -> Result<(), String> {
    let mut rng = stream_rng(5, StreamKey::new(Purpose::Generic, 0, 0, 3));
    let mut coeffs = DVector::zeros(60);
    for j in 0..5 {
        coeffs[j] = 0.5 * standard_normal_vector(&mut rng, 1)[0];
        coeffs[30 + j] = 0.5 * standard_normal_vector(&mut rng, 1)[0];
    }
    let residual_norm = |m: usize| {
        let v = TransportModel::solution_on_grid(&coeffs, m);
        let h = 1.0 / (m - 1) as f64;
        let mut acc = 0.0;
        let mut count = 0usize;
        for i1 in 0..m - 1 {
            let u_x1 = TransportModel::coefficient_function(&coeffs, i1 as f64 * h);
            for i2 in 0..m - 1 {
                let dv1 = (v[(i1 + 1, i2)] - v[(i1, i2)]) / h;
                let dv2 = (v[(i1, i2 + 1)] - v[(i1, i2)]) / h;
                let res = dv1 - dv2 - u_x1 * v[(i1, i2)];
                acc += res * res;
                count += 1;
            }
        }
        (acc / count as f64).sqrt()
    };
    let r21 = residual_norm(21);
    let r41 = residual_norm(41);
    let r81 = residual_norm(81);
    if !(r81 < r41 && r41 < r21) {
        return Err(format!("residuals not decreasing: {r21:.3e}, {r41:.3e}, {r81:.3e}"));
    }
    // two halvings of h should cut an O(h) residual to about a quarter
    if r81 > 0.35 * r21 {
        return Err(format!(
            "residual decay slower than O(h): {r21:.3e} -> {r81:.3e} over two refinements"
        ));
    }
    Ok(())
}
