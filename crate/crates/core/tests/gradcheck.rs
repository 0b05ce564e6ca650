use mmdl_core::gradcheck::{finite_diff_gradcheck, suite, MODEL_TOLERANCE, OP_TOLERANCE};
use mmdl_core::Tensor;

#[test]
fn every_op_and_model_matches_finite_differences() {
    let entries = suite().unwrap();
    assert!(entries.iter().any(|e| e.name == "model_rgb"));
    for e in &entries {
        assert!(e.passed(), "{}: {:e} > {:e}", e.name, e.max_rel_error, e.tolerance);
    }
    assert!(entries.iter().filter(|e| e.tolerance == OP_TOLERANCE).count() >= 20);
    assert_eq!(entries.iter().filter(|e| e.tolerance == MODEL_TOLERANCE).count(), 3);
}

#[test]
fn a_wrong_gradient_is_caught() {
    // At the floor kink the tape reports the one-sided slope 0 while the
    // central difference sees half of 1/x.
    let x = Tensor::new(&[1], vec![1e-3]).unwrap();
    let err = finite_diff_gradcheck(|g, v| Ok(g.log(v, 1e-3)), &x, 1e-4).unwrap();
    assert!(err > 1e-2, "{err}");
}
