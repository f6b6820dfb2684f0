//! The quick property suite and its coverage checklist.

use std::time::Instant;

use ua_core::propsuite::{gradcheck_loss_q, registry, run_suite, uncovered, Tally, COVERAGE};

#[test]
fn quick_suite_passes_within_a_minute() {
    let started = Instant::now();
    let results = run_suite(true);
    let elapsed = started.elapsed().as_secs_f64();
    for r in &results {
        println!("{:<32} {:>6} instances {:>4} failures", r.name, r.instances, r.failures);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "failed properties: {failed:#?}");
    assert!(results.iter().all(|r| !registry().iter().any(|p| p.training && p.name == r.name)));
    assert!(elapsed < 60.0, "quick suite took {elapsed:.1}s");
}

#[test]
fn sign_error_in_loss_q_gradient_is_caught() {
    let mut t = Tally::default();
    gradcheck_loss_q(&mut t, true);
    let r = t.finish("gradcheck_loss_q_mutated", Instant::now());
    assert!(!r.passed());
    assert!(r.counterexample.is_some());
}

#[test]
fn every_checklist_entry_outside_the_cli_has_a_property() {
    let props = registry();
    let names: Vec<&str> = props.iter().map(|p| p.name.as_str()).collect();
    let missing: Vec<String> = uncovered(&names).into_iter().filter(|n| !n.starts_with("cli_")).collect();
    assert!(missing.is_empty(), "{missing:?}");
    for module in ["core", "atlasmath", "model", "losses", "data", "train", "probe", "cli"] {
        assert!(COVERAGE.iter().any(|c| c.module == module), "no checklist entry for {module}");
    }
}
