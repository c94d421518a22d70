use synthvox_core::selftest;

#[test]
fn invariant_suite_passes() {
    let checks = selftest::run_all(7).unwrap();
    for c in &checks {
        println!("{c}");
    }
    assert!(checks.iter().all(|c| c.passed));
}

#[test]
fn invariants_hold_for_other_seeds() {
    for seed in [1, 2] {
        assert!(selftest::cfg_telescoping(20, seed).unwrap().passed);
        assert!(selftest::dropout_distribution(100_000, seed).unwrap().passed);
    }
}
