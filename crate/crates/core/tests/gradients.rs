mod support;

use support::{conv_oracle_sweep, gradient_suite};

#[test]
fn every_primitive_and_objective_matches_finite_differences() {
    let outcomes = gradient_suite(20, 11);
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed()).collect();
    for o in &outcomes {
        eprintln!("{:<24} worst {:.2e} checked {} excluded {}", o.name, o.worst, o.checked, o.excluded);
    }
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn conv2d_matches_direct_loops() {
    let worst = conv_oracle_sweep(100, 5).unwrap();
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}
