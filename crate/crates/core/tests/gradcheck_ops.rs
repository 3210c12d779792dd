//! Finite-difference checks of every differentiable primitive in f64.

use ctm_core::gradcheck::{op_suite, GRADCHECK_TOLERANCE};

#[test]
fn every_primitive_matches_central_differences() {
    let results = op_suite().unwrap();
    assert!(results.len() >= 25);
    let failures: Vec<_> = results.iter().filter(|(_, e)| !(*e < GRADCHECK_TOLERANCE)).collect();
    assert!(failures.is_empty(), "{failures:?}");
}
