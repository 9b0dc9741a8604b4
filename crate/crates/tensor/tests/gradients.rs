//! Every operator's backward pass against central finite differences.

use cardiocap_tensor::check::{gradcheck, op_suite, GradCheckConfig};
use cardiocap_tensor::Tensor;

#[test]
fn every_op_matches_finite_differences() {
    let suite = op_suite().unwrap();
    assert!(suite.len() >= 25);
    for c in &suite {
        assert!(c.report.max_rel_error < 1e-4, "{}: {:.3e} at {:?}", c.name, c.report.max_rel_error, c.report.worst);
        assert!(c.report.checked > 0);
    }
}

#[test]
fn a_hidden_dependency_is_caught() {
    // x * stop_gradient(x): the tape sees d/dx = x, the true derivative is 2x
    let x = Tensor::new(vec![3], vec![-0.5, 0.4, -0.7]).unwrap();
    let report = gradcheck(&[x], GradCheckConfig::default(), |g, v| {
        let copy = Tensor::new(vec![3], g.data(v[0]).to_vec())?;
        let c = g.input(copy);
        g.mul(v[0], c)
    })
    .unwrap();
    assert!(report.max_rel_error > 0.4, "{:.3e}", report.max_rel_error);
}
