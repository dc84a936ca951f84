use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statebridge_core::dist::LogNormalSpec;
use statebridge_core::state::{ExecutionState, FailureCategory};
use statebridge_sim::{grasp_loop, inject_failure, sample_phase_duration, PhaseConfig, SimConfig};

#[test]
fn sampled_median_matches_configured_median() {
    let mut config = SimConfig::failfree();
    config.navigating.duration = LogNormalSpec::new(30.0, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut draws: Vec<u64> = (0..10_000)
        .map(|_| sample_phase_duration(ExecutionState::Navigating, &config, &mut rng).unwrap())
        .collect();
    assert!(draws.iter().all(|&d| d > 0));
    draws.sort_unstable();
    let median = (draws[4_999] + draws[5_000]) as f64 / 2.0;
    assert!((median - 30_000.0).abs() <= 0.05 * 30_000.0, "median {median}");
}

#[test]
fn failure_rate_matches_probability() {
    let mut config = SimConfig::failfree();
    config.searching = PhaseConfig::failing(
        LogNormalSpec::fixed(1.0),
        0.3,
        &[(FailureCategory::SystemHang, 0.5), (FailureCategory::Other, 0.5)],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 10_000;
    let mut failures = 0;
    let mut hangs = 0;
    for _ in 0..n {
        match inject_failure(ExecutionState::Searching, &config, &mut rng).unwrap() {
            Some(FailureCategory::SystemHang) => {
                failures += 1;
                hangs += 1;
            }
            Some(_) => failures += 1,
            None => {}
        }
    }
    let rate = failures as f64 / n as f64;
    assert!((rate - 0.3).abs() <= 0.02, "rate {rate}");
    let share = hangs as f64 / failures as f64;
    assert!((share - 0.5).abs() < 0.05, "hang share {share}");
}

/// E[attempts] for a capped geometric: sum over k<cap of k·p·q^(k-1), plus
/// cap·q^(cap-1) for reaching the last attempt.
fn expected_attempts(p: f64, cap: u32) -> f64 {
    let q = 1.0 - p;
    let body: f64 = (1..cap).map(|k| k as f64 * p * q.powi(k as i32 - 1)).sum();
    body + cap as f64 * q.powi(cap as i32 - 1)
}

#[test]
fn grasp_attempts_match_closed_form() {
    assert!((expected_attempts(0.5, 3) - 1.75).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let total: u64 = (0..n).map(|_| u64::from(grasp_loop(0.5, 3, &mut rng).1)).sum();
    let mean = total as f64 / n as f64;
    assert!((mean - 1.75).abs() <= 0.02, "mean attempts {mean}");
}
