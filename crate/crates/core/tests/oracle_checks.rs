use ctrlcap_oracles::checks::{gradient_checks, identity_checks, metric_checks, Check};

fn assert_all(checks: Vec<Check>) {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    assert!(failed.is_empty(), "{}", failed.join("\n"));
}

#[test]
fn metrics_match_oracles() {
    assert_all(metric_checks());
}

#[test]
fn gradients_match_finite_differences() {
    assert_all(gradient_checks());
}

#[test]
fn structural_identities_hold() {
    assert_all(identity_checks());
}

