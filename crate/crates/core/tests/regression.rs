mod common;

use leakid::regression::{fit_ols, predict_pressure, reconstruction_error};
use proptest::prelude::*;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ols_matches_normal_equations(n in 2usize..=5, d in 0usize..=2, len in 20usize..=50, gauge_pick in 0usize..5, seed in any::<u64>()) {
        let gauge = gauge_pick % n;
        let (panel, known) = common::random_panel(n, len, d, seed);
        let fit = fit_ols(&panel, &known, gauge).unwrap();
        let q_sq: Vec<Vec<f64>> = known.values.iter().map(|v| v.iter().map(|x| x * x).collect()).collect();
        let (k0, k1, kd) = common::ols_normal_equations(panel.values(), &q_sq, gauge);
        for s in 0..n {
            prop_assert!(rel_close(fit.k0[s], k0[s], 1e-8), "k0[{}] {} vs {}", s, fit.k0[s], k0[s]);
            prop_assert!(rel_close(fit.k1[s], k1[s], 1e-8), "k1[{}] {} vs {}", s, fit.k1[s], k1[s]);
            for c in 0..d {
                prop_assert!(rel_close(fit.kd[c][s], kd[c][s], 1e-8), "kd[{}][{}] {} vs {}", c, s, fit.kd[c][s], kd[c][s]);
            }
        }
    }

    #[test]
    fn estimates_are_gauge_invariant(n in 2usize..=5, d in 0usize..=2, scale in 0.1f64..10.0, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let (panel, known) = common::random_panel(n, 30, d, seed);
        let fit = fit_ols(&panel, &known, 0).unwrap();
        let mut moved = fit.clone();
        for s in 0..n {
            moved.k0[s] = scale * fit.k0[s] + shift;
            moved.k1[s] = scale * fit.k1[s];
        }
        moved.kd.iter_mut().flatten().for_each(|v| *v *= scale);
        let a = predict_pressure(&fit, &panel, &known).unwrap();
        let b = predict_pressure(&moved, &panel, &known).unwrap();
        for i in 0..n {
            for j in 0..n {
                for t in 0..panel.len() {
                    let (x, y) = (a.get(i, j, t), b.get(i, j, t));
                    prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0), "{} vs {}", x, y);
                }
            }
        }
    }

    #[test]
    fn diagonal_error_is_exactly_zero(n in 2usize..=5, d in 0usize..=2, seed in any::<u64>()) {
        let (panel, known) = common::random_panel(n, 25, d, seed);
        let fit = fit_ols(&panel, &known, n - 1).unwrap();
        let mre = reconstruction_error(&fit, &panel, &known).unwrap();
        for i in 0..n {
            prop_assert!(mre.full.series(i, i).iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn canonical_gauge_keeps_estimates() {
    let (panel, known) = common::random_panel(4, 40, 1, 17);
    let fit = fit_ols(&panel, &known, 0).unwrap();
    let other = fit.canonical(2);
    assert_eq!(other.k1[2], 1.0);
    assert_eq!(other.k0[2], 0.0);
    let a = predict_pressure(&fit, &panel, &known).unwrap();
    let b = predict_pressure(&other, &panel, &known).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            for t in 0..panel.len() {
                assert!((a.get(i, j, t) - b.get(i, j, t)).abs() <= 1e-9 * a.get(i, j, t).abs());
            }
        }
    }
}
