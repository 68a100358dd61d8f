use nashlab::bounds::{convergence_study, mollify_coefficients};
use nashlab::catalog::{sample_drift, sample_matrix, DriftSpec, MatrixSpec};
use nashlab::grid::{EllipticityWindow, GridSpec, SampledField};
use nashlab::solver::{assemble, DriftScheme, DtPolicy, Stepper};

fn main() {
    let g = GridSpec::new(2, 3.0, 129).unwrap();
    let a = sample_matrix(&MatrixSpec::checkerboard(2, 1.0, 4.0, 0.5).unwrap(), g).unwrap();
    let b = sample_drift(&DriftSpec::log_refined(2, 0.1, 1.0, None).unwrap(), g).unwrap();
    let w = EllipticityWindow::new(1.0 - 1e-9, 4.0 + 1e-9).unwrap();
    let mut ops = Vec::new();
    for eps in [0.016, 0.008, 0.004, 0.002] {
        let (a_eps, b_eps) = mollify_coefficients(&a, &b, eps, eps).unwrap();
        ops.push(assemble(&a_eps, &b_eps, g, w, DriftScheme::Auto).unwrap());
    }
    let datum =
        SampledField::from_scalar_fn(g, |x| (-x.iter().map(|v| v * v).sum::<f64>()).exp()).unwrap();
    for ratio in [0.04, 0.02, 0.01] {
        let mut policy = DtPolicy::default();
        policy.ratio = ratio;
        policy.initial_fraction = ratio / 4.0;
        let rep = convergence_study(&ops, &[datum.clone()], &[0.05, 0.1, 0.2], policy, Stepper::ImplicitEuler).unwrap();
        println!("ratio {ratio}: {:?}", rep.distances[0]);
    }
}
