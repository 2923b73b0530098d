use coshape::model::two_tx_diagonal;
use coshape::simulate::{run_mse_sweep, Algorithm, SweepConfig};
use coshape::Scenario;

fn broadcast() -> Scenario {
    two_tx_diagonal(&[0.1, 0.9, 0.1, 0.9], &[0.9, 0.1, 0.9, 0.1]).unwrap()
}

#[test]
fn mse_ordering_on_broadcast_grid() {
    let cfg = SweepConfig { trials: 20_000, seed: 1, ..SweepConfig::default() };
    let res = run_mse_sweep(&broadcast(), &cfg).unwrap();
    for &r in &cfg.rates {
        let get = |a| res.find(a, r, Some(0)).unwrap();
        let (sh, un, nc, wz) =
            (get(Algorithm::Shaped), get(Algorithm::Unshaped), get(Algorithm::NoCoop), get(Algorithm::WzBound));
        assert!(sh.predicted_mse <= un.predicted_mse + 1e-12 && un.predicted_mse <= nc.predicted_mse + 1e-12);
        assert!(wz.mse <= sh.predicted_mse);
        assert!(sh.mse <= un.mse + sh.mse_ci95 + un.mse_ci95, "rate {r}");
        assert!(un.mse <= nc.mse + un.mse_ci95 + nc.mse_ci95, "rate {r}");
        assert!(wz.mse <= sh.mse + sh.mse_ci95, "rate {r}");
    }
    let keys: Vec<_> = res.records.iter().map(|r| (r.algorithm, r.rate)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn monte_carlo_error_shrinks_with_trials() {
    let s = broadcast();
    let gaps: Vec<f64> = [1_000, 10_000, 100_000]
        .iter()
        .map(|&trials| {
            // Average over seeds so the check is about the rate, not one draw.
            (0..8)
                .map(|seed| {
                    let cfg = SweepConfig {
                        rates: vec![8],
                        algorithms: vec![Algorithm::Shaped],
                        trials,
                        seed,
                        ..SweepConfig::default()
                    };
                    let r = run_mse_sweep(&s, &cfg).unwrap().records.remove(0);
                    (r.mse - r.predicted_mse).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    // Root-mean-square error falls roughly as 1/sqrt(trials).
    assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "{gaps:?}");
    assert!(gaps[2] < 0.3 * gaps[0], "{gaps:?}");
}
