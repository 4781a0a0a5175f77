use std::time::Instant;

use endonet::tensor::op_suite;

#[test]
fn every_op_matches_central_differences() {
    let t = Instant::now();
    let report = op_suite(20, 2024, 1e-5, 1e-4).unwrap();
    assert_eq!(report.len(), 22);
    for r in &report {
        assert!(r.passed, "{}: max relative error {:.3e}", r.op, r.max_rel_err);
        assert_eq!(r.instances, 20);
    }
    assert!(t.elapsed().as_secs_f64() < 60.0);
}
