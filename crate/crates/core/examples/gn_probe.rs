// Probe: where does the MAP error live? Jacobian spectrum + error components.
use nalgebra::{DMatrix, DVector};
use sparse_ekp::problems::TransportProblem;

fn fd_jacobian(f: &dyn sparse_ekp::ForwardModel, u: &DVector<f64>) -> DMatrix<f64> {
    let d = f.input_dim();
    let k = f.output_dim();
    let mut jac = DMatrix::zeros(k, d);
    let h = 1e-6;
    for j in 0..d {
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        jac.set_column(j, &((f.apply(&up) - f.apply(&um)) / (2.0 * h)));
    }
    jac
}

fn main() {
    let tp = TransportProblem::new(0);
    let problem = &tp.problem;
    let truth = problem.truth.clone().unwrap();
    let d = problem.input_dim();
    let sigma2 = 0.01;
    let theta0 = 0.04;
    let mut u = DVector::zeros(d);
    for _ in 0..200 {
        let jac = fd_jacobian(problem.forward.as_ref(), &u);
        let residual = &problem.data - problem.forward.apply(&u);
        let mut normal = jac.transpose() * &jac / sigma2;
        for i in 0..d {
            normal[(i, i)] += 1.0 / theta0;
        }
        let rhs = jac.transpose() * &residual / sigma2 - &u / theta0;
        let du = normal.cholesky().unwrap().solve(&rhs);
        u += 0.5 * &du;
        if du.norm() < 1e-11 { break; }
    }
    let err = &u - &truth;
    println!("error norm {:.4}", err.norm());
    let mut comps: Vec<(usize, f64)> = err.iter().cloned().enumerate().collect();
    comps.sort_by(|a, b| b.1.abs().partial_cmp(&a.1.abs()).unwrap());
    println!("largest error components (idx<30 = sin_(idx+1), idx>=30 = cos_(idx-29)):");
    for (i, v) in comps.iter().take(10) {
        let name = if *i < 30 { format!("sin_{}", i + 1) } else { format!("cos_{}", i - 29) };
        println!("  {name:8} err {v:+.3}  truth {:+.3}  map {:+.3}", truth[*i], u[*i]);
    }
    // Jacobian spectrum at the truth
    let jac = fd_jacobian(problem.forward.as_ref(), &truth);
    let svd = jac.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!("\nsingular values of J(truth): max {:.3}", sv[0]);
    println!("  smallest five: {:?}", &sv[sv.len()-5..].iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>());
    // smallest right-singular vector: which modes?
    let vt = svd.v_t.unwrap();
    let vmin = vt.row(sv.len() - 1);
    let mut vcomps: Vec<(usize, f64)> = vmin.iter().cloned().enumerate().collect();
    vcomps.sort_by(|a, b| b.1.abs().partial_cmp(&a.1.abs()).unwrap());
    println!("  weakest direction components:");
    for (i, v) in vcomps.iter().take(6) {
        let name = if *i < 30 { format!("sin_{}", i + 1) } else { format!("cos_{}", i - 29) };
        println!("    {name:8} {v:+.3}");
    }
}
