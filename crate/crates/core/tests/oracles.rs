mod support;

use std::time::Instant;

use support::oracles;

#[test]
fn math_matches_scalar_oracles() {
    let start = Instant::now();
    let results = oracles::all(oracles::INSTANCES);
    let elapsed = start.elapsed();
    for r in &results {
        assert!(r.passed(), "{}: max abs error {:e} over {} instances", r.name, r.max_abs_error, r.instances);
    }
    assert!(elapsed.as_secs_f64() < 5.0, "oracle suite took {elapsed:?}");
}

#[test]
fn topk_oracle_is_exact() {
    assert_eq!(oracles::topk(oracles::INSTANCES).max_abs_error, 0.0);
}
