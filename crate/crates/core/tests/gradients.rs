use std::time::Instant;

use mgms::gradsuite::{end_to_end_mim_check, primitive_checks, PRIMITIVE_TOL};
use mgms::tensor::{Graph, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    let cases = primitive_checks().unwrap();
    assert!(cases.len() >= 38);
    let failed: Vec<_> = cases.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
    assert!(cases.iter().all(|c| c.tolerance == PRIMITIVE_TOL));
}

#[test]
fn end_to_end_mim_matches_finite_differences() {
    let t = Instant::now();
    let case = end_to_end_mim_check().unwrap();
    assert!(case.passed(), "{case:?}");
    assert!(t.elapsed().as_secs() < 60);
}

#[test]
fn detach_stops_gradient() {
    let x = Tensor::new(&[4], vec![0.5f64, -1.5, 2.0, 0.25]).unwrap().with_grad();
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let d = g.detach(xv);
    let y = g.mul(d, xv).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    // d/dx sum(stop(x) * x) = x, half the true derivative
    assert_eq!(grads.wrt(xv).unwrap(), x.data());
}
