use proptest::prelude::*;
use simkrig::simreg::wrap_angle;
use simkrig::synth::{generate_analytical_with, AnalyticalSpec, ShiftMode};
use simkrig::{contrast, estimate_params, estimate_params_blocked, make_weights, to_fourier, EstimationConfig};

fn spectral(n: usize, j: usize, seed: u64) -> AnalyticalSpec {
    AnalyticalSpec {
        shift: ShiftMode::Spectral,
        ..AnalyticalSpec::new(n, j, 0.0, seed)
    }
}

#[test]
fn recovers_spectral_parabola_unblocked_and_blocked() {
    let (curves, truth) = generate_analytical_with(&spectral(31, 51, 3)).unwrap();
    let cfg = EstimationConfig::default();
    for est in [
        estimate_params(&curves, &cfg).unwrap().0,
        estimate_params_blocked(&curves, 7, &cfg).unwrap().0,
    ] {
        for k in 0..31 {
            assert!((est.alpha[k] - truth.alpha[k]).abs() < 1e-4);
            assert!(wrap_angle(est.theta[k] - truth.theta[k]).abs() < 1e-4);
            assert!((est.v[k] - truth.v[k]).abs() < 1e-4);
        }
    }
}

#[test]
fn reference_choice_is_a_relabelling() {
    // Moving a different curve to the top re-expresses every parameter
    // relative to it: alpha_k / alpha_r and theta_k - theta_r.
    let (curves, _) = generate_analytical_with(&spectral(8, 31, 5)).unwrap();
    let cfg = EstimationConfig::default();
    let (base, _) = estimate_params(&curves, &cfg).unwrap();
    let order = [4, 0, 1, 2, 3, 5, 6, 7];
    let (moved, _) = estimate_params(&curves.select_rows(&order), &cfg).unwrap();
    for (pos, &k) in order.iter().enumerate() {
        assert!((moved.alpha[pos] - base.alpha[k] / base.alpha[4]).abs() < 1e-6);
        assert!(wrap_angle(moved.theta[pos] - (base.theta[k] - base.theta[4])).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn estimate_never_worse_than_truth(seed in any::<u64>(), noise in 0.0f64..1.0) {
        let spec = AnalyticalSpec { shift: ShiftMode::Spectral, ..AnalyticalSpec::new(6, 21, noise, seed) };
        let (curves, truth) = generate_analytical_with(&spec).unwrap();
        let table = to_fourier(&curves).unwrap();
        let w = make_weights(21, 1.5).unwrap();
        let (est, diag) = estimate_params(&curves, &EstimationConfig::default()).unwrap();
        let at_truth = contrast(&truth, &table, &w).unwrap();
        prop_assert!(diag.contrast <= at_truth * (1.0 + 1e-9) + 1e-14);
        prop_assert!(est.alpha.iter().all(|a| *a > 0.0));
        prop_assert!(est.theta.iter().all(|t| (-std::f64::consts::PI..std::f64::consts::PI).contains(t)));
    }
}
