use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coshape::allocation::{allocate_exhaustive, composition_count, compositions};
use coshape::fusion::{closed_form_mse, fusion_weights, mse_for_weights, wyner_ziv_bound};
use coshape::linalg::{self, c, CMat};
use coshape::quantizer::{highres_error_cov, m2n_constant};
use coshape::shaping::{objective_exact, optimize_shaping, random_shaping, unshaped_model, SolverOptions};
use coshape::simulate::{scenario_digest, zf_sum_rate, PowerMode};
use coshape::{CovMatrix, Dims, Scenario, ScenarioDoc};

fn random_hpd(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> CovMatrix {
    let a = CMat::from_fn(n, n, |_, _| linalg::standard_complex_normal(1, rng)[0]);
    let m = (&a * a.adjoint() * c(1.0 / n as f64) + linalg::identity(n) * c(0.1)) * c(scale);
    CovMatrix::new(linalg::hermitize(&m)).unwrap()
}

fn two_tx(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(2, 2, 1, 1).unwrap();
    let q_h = random_hpd(4, 1.0, &mut rng);
    let errs = (0..2).map(|_| random_hpd(4, rng.random_range(0.1..1.0), &mut rng)).collect();
    Scenario::new(dims, q_h, errs).unwrap()
}

fn unshaped(s: &Scenario, i: usize, rate: u32) -> Vec<CovMatrix> {
    unshaped_model(s, i, &[rate]).unwrap().into_iter().map(|h| h.q_q).collect()
}

fn no_coop(s: &Scenario, i: usize) -> f64 {
    let mut sets = s.coop_sets().to_vec();
    sets[i].clear();
    closed_form_mse(&s.clone().with_coop(sets).unwrap(), i, &[]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fused_mse_between_bound_and_no_cooperation(seed in any::<u64>(), rate in 0u32..40, tx in 0usize..2) {
        let s = two_tx(seed);
        let d = closed_form_mse(&s, tx, &unshaped(&s, tx, rate)).unwrap();
        let wz = wyner_ziv_bound(s.q_h().matrix(), s.q_err(0).matrix(), s.q_err(1).matrix()).unwrap();
        prop_assert!(wz <= d * (1.0 + 1e-9));
        prop_assert!(d <= no_coop(&s, tx) * (1.0 + 1e-9));
    }

    #[test]
    fn optimal_weights_are_stationary(seed in any::<u64>(), rate in 1u32..30, eps in 1e-4f64..1e-2) {
        let s = two_tx(seed);
        let qq = unshaped(&s, 0, rate);
        let rule = fusion_weights(&s, 0, &qq).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let d = CMat::from_fn(4, 4, |_, _| linalg::standard_complex_normal(1, &mut rng)[0]) * c(eps);
        let worse = mse_for_weights(&s, 0, &qq, &(&rule.w_ii + d), &rule.w_k).unwrap();
        prop_assert!(worse >= rule.predicted_mse - 1e-12);
        prop_assert!((rule.quadratic_mse(&s).unwrap() - rule.predicted_mse).abs() < 1e-10);
    }

    #[test]
    fn unshaped_mse_non_increasing_in_rate(seed in any::<u64>(), rate in 0u32..40) {
        let s = two_tx(seed);
        let lo = closed_form_mse(&s, 0, &unshaped(&s, 0, rate)).unwrap();
        let hi = closed_form_mse(&s, 0, &unshaped(&s, 0, rate + 1)).unwrap();
        prop_assert!(hi <= lo * (1.0 + 1e-12));
    }

    #[test]
    fn clamped_error_stays_below_source(seed in any::<u64>(), rate in 0u32..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = random_hpd(3, 1.0, &mut rng);
        let b = CovMatrix::new(random_shaping(3, &mut rng)).unwrap();
        let hr = highres_error_cov(&gamma, &b, rate, m2n_constant(6, None).unwrap()).unwrap();
        let gap = gamma.matrix() - hr.q_q.matrix();
        prop_assert!(linalg::herm_eigenvalues(&gap)[0] >= -1e-10);
        prop_assert!(hr.q_q.min_eigenvalue() > 0.0);
    }

    #[test]
    fn objective_ignores_shaping_scale(seed in any::<u64>(), rate in 4u32..24, scale in 0.1f64..10.0) {
        let s = two_tx(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let b = random_shaping(4, &mut rng);
        let f1 = objective_exact(&[CovMatrix::new(b.clone()).unwrap()], &s, 0, &[rate]).unwrap();
        let f2 = objective_exact(&[CovMatrix::new(b * c(scale)).unwrap()], &s, 0, &[rate]).unwrap();
        prop_assert!((f1 - f2).abs() <= 1e-10 * f1);
    }

    #[test]
    fn compositions_cover_the_budget(total in 0u32..12, parts in 1usize..4) {
        let all = compositions(total, parts);
        prop_assert_eq!(all.len() as u128, composition_count(total, parts));
        prop_assert!(all.iter().all(|c| c.len() == parts && c.iter().sum::<u32>() == total));
    }

    #[test]
    fn zf_sum_rate_is_finite_and_non_negative(seed in any::<u64>(), p in 0.1f64..1000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = Dims::new(2, 2, 1, 1).unwrap();
        let h = linalg::standard_complex_normal(4, &mut rng);
        let ests: Vec<_> = (0..2).map(|_| &h + linalg::standard_complex_normal(4, &mut rng) * c(0.3)).collect();
        for mode in [PowerMode::PerTx, PowerMode::SumPower] {
            let r = zf_sum_rate(&h, &ests, dims, p, mode).unwrap();
            prop_assert!(r.is_finite() && r >= 0.0);
        }
    }

    #[test]
    fn scenario_document_round_trip(seed in any::<u64>()) {
        let s = two_tx(seed).with_uniform_rate(5);
        let doc = ScenarioDoc::from_scenario(&s);
        let back = ScenarioDoc::from_json(&serde_json::to_string(&doc).unwrap()).unwrap().to_scenario().unwrap();
        prop_assert_eq!(scenario_digest(&back), scenario_digest(&s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn shaped_never_worse_than_unshaped(seed in any::<u64>(), rate in 0u32..30) {
        let s = two_tx(seed);
        let sol = optimize_shaping(&s, 0, &[rate], &SolverOptions::default()).unwrap();
        prop_assert!(sol.objective_exact <= sol.objective_unshaped + 1e-12);
        for b in &sol.b {
            let det = linalg::logdet_hpd(b.matrix(), "B").unwrap().exp();
            prop_assert!((det - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn allocation_spends_the_budget_and_improves_with_it(seed in any::<u64>(), total in 0u32..10) {
        let s = two_tx(seed);
        let opts = SolverOptions::default();
        let a = allocate_exhaustive(&s, total, &opts).unwrap().best;
        let b = allocate_exhaustive(&s, total + 2, &opts).unwrap().best;
        prop_assert_eq!(a.total(), total);
        prop_assert!(b.avg_mse <= a.avg_mse * (1.0 + 1e-9));
        let mirrored = allocate_exhaustive(&s.swap_tx(0, 1), total, &opts).unwrap().best;
        prop_assert!((mirrored.avg_mse - a.avg_mse).abs() <= 1e-9 * a.avg_mse);
    }
}
