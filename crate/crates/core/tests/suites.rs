use ctkt::verify::*;

fn check(r: SuiteReport) {
    assert!(r.ok(), "{} {}/{} first failure: {:?}", r.name, r.passed, r.total, r.first_failure);
}

#[test]
fn ctc_matches_brute_force() {
    let r = ctc_oracle_suite(&VerifyOptions::default());
    assert_eq!(r.total, 220);
    check(r);
}

#[test]
fn gradients_match_finite_differences() {
    let r = gradient_suite(&VerifyOptions { seed: 3, ..Default::default() });
    assert!(r.total >= 20 * 10);
    check(r);
}

#[test]
fn injected_ctc_sign_error_is_caught() {
    let r = gradient_suite(&VerifyOptions { seed: 3, inject_ctc_sign_error: true });
    assert!(!r.ok());
    let f = r.first_failure.expect("a failing case");
    assert!(f.case.starts_with("ctc"), "{f:?}");
}

#[test]
fn cif_invariants_hold() {
    let r = cif_suite(&VerifyOptions::default());
    assert_eq!(r.total, 500);
    check(r);
}

#[test]
fn masking_properties_hold() {
    let r = masking_suite(&VerifyOptions { seed: 11, ..Default::default() });
    assert_eq!(r.total, 150);
    check(r);
}

#[test]
fn decoder_equivalences_hold() {
    check(decoder_suite(&VerifyOptions::default()));
}

#[test]
fn other_seeds_pass_too() {
    for seed in [1, 2] {
        let report = run_all(&VerifyOptions { seed, ..Default::default() });
        for s in report.suites {
            check(s);
        }
    }
}
