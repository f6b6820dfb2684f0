//! The full property suite, including the training-dependent properties.

use std::time::Instant;

use ua_core::propsuite::run_suite;

#[test]
fn full_suite_passes_within_thirty_minutes() {
    let started = Instant::now();
    let results = run_suite(false);
    let elapsed = started.elapsed().as_secs_f64();
    for r in &results {
        println!(
            "{} {:<32} {:>6} instances {:>4} failures {:>7.1}s",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.instances,
            r.failures,
            r.seconds
        );
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "failed properties: {failed:#?}");
    for name in ["entropy_ordering", "overfit_sanity", "probe_chance_level"] {
        assert!(results.iter().any(|r| r.name == name), "{name} did not run");
    }
    assert!(elapsed < 1800.0, "full suite took {elapsed:.0}s");
}
