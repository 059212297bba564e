//! Reverse-mode gradients against central differences, at f64.

mod common;

use common::{joint_gradient_error, primitive_errors, JOINT_TOL, PRIMITIVE_TOL};

#[test]
fn every_primitive_matches_finite_differences() {
    let bad: Vec<_> = primitive_errors().into_iter().filter(|&(_, e)| !(e <= PRIMITIVE_TOL)).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn joint_loss_matches_finite_differences() {
    let (err, n) = joint_gradient_error();
    assert!(err <= JOINT_TOL, "relative error {err:e} over {n} coordinates");
}
