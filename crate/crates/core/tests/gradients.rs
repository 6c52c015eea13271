//! Central finite-difference checks for every autodiff operation and for the
//! full training objective on a micro instance.

mod common;

use common::grad_suite::{end_to_end_error, op_cases, refiner_step_error, TOL};
use common::{random_tensor, rng};
use densefusion::autodiff::Tape;

#[test]
fn every_op() {
    let bad: Vec<_> = op_cases().into_iter().filter(|(_, e)| !(*e < TOL)).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn end_to_end_objective() {
    for symmetric in [false, true] {
        let e = end_to_end_error(symmetric);
        assert!(e < TOL, "symmetric={symmetric}: {e:e}");
    }
}

#[test]
fn refinement_step() {
    let e = refiner_step_error();
    assert!(e < TOL, "{e:e}");
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(10);
    let x = random_tensor(&mut r, &[9, 9, 3], -1.0, 1.0);
    let k = random_tensor(&mut r, &[3, 3, 3, 4], -1.0, 1.0);
    let run = || {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let kv = t.constant(k.clone());
        let y = t.conv2d(xv, kv, 2).unwrap();
        let m = t.reshape(y, &[25, 4]).unwrap();
        let m = t.mean_over_rows(m).unwrap();
        t.value(m).clone()
    };
    assert_eq!(run(), run());
}
