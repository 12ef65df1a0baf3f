//! Finite-difference agreement of every registered gradient over many seeds.

use dcer_core::gradcheck::GradCheckConfig;
use dcer_core::gradsuite::run_suite;

#[test]
fn every_registered_gradient_matches_finite_differences_over_ten_seeds() {
    let mut failures = Vec::new();
    let mut worst = (0.0f32, String::new());
    for seed in 0..10 {
        for c in run_suite(seed, GradCheckConfig::default()).unwrap() {
            if c.report.rel_err > worst.0 {
                worst = (c.report.rel_err, format!("{} (seed {seed})", c.name));
            }
            if !c.report.passed() {
                failures.push(format!("seed {seed} {}: {:?}", c.name, c.report));
            }
        }
    }
    eprintln!("worst relative error {:.2e} at {}", worst.0, worst.1);
    assert!(failures.is_empty(), "{failures:#?}");
}
