#![cfg(not(feature = "f32"))]

mod common;

use chamtoy::numerics::Scalar;
use common::{check_model, check_op, op_cases};

#[test]
fn every_op_matches_central_differences() {
    for case in op_cases() {
        let worst = (0..100).map(|s| check_op(&case, s)).fold(0.0, Scalar::max);
        assert!(worst < 1e-4, "{}: relative error {worst:e}", case.name);
    }
}

#[test]
fn two_layer_model_matches_central_differences() {
    for seed in 0..100 {
        let worst = check_model(seed, 40);
        assert!(worst < 1e-3, "seed {seed}: relative error {worst:e}");
    }
}
