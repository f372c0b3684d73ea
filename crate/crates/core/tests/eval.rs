mod common;

use leakid::eval::{
    classification_metrics, classify, grid, median_ttd_hours, pareto_front, run_variant, sensitivity_sweep, Classification,
    DetectionConfig, RunConfig, RunData, Variant,
};
use leakid::synth::{generate, reference_scenario, ReferenceKind};
use proptest::prelude::*;

#[test]
fn run_level_metric_rows() {
    let m = classification_metrics(92, 7, 1);
    assert!((m.precision.unwrap() - 0.93).abs() <= 0.005);
    assert!((m.recall.unwrap() - 0.99).abs() <= 0.005);
    assert!((m.f1.unwrap() - 0.96).abs() <= 0.005);
    let m = classification_metrics(96, 3, 1);
    assert!((m.precision.unwrap() - 0.97).abs() <= 0.005);
    assert!((m.recall.unwrap() - 0.99).abs() <= 0.005);
    assert!((m.f1.unwrap() - 0.98).abs() <= 0.005);
    let m = classification_metrics(5, 0, 0);
    assert_eq!((m.precision, m.recall, m.f1), (Some(1.0), Some(1.0), Some(1.0)));
    let m = classification_metrics(0, 0, 0);
    assert_eq!((m.precision, m.recall, m.f1), (None, None, None));
}

#[test]
fn pareto_star_patterns() {
    let abrupt = [(23.0, 0.990), (22.0, 0.985), (22.1, 0.985), (21.8, 0.974), (21.7, 0.969)];
    assert_eq!(pareto_front(&abrupt), vec![true, true, false, true, true]);
    let incipient = [(25.2, 0.995), (15.4, 0.990), (22.3, 0.985), (28.3, 0.980)];
    assert_eq!(pareto_front(&incipient), vec![true, true, false, false]);
    assert_eq!(pareto_front(&[(3.0, 0.5)]), vec![true]);
}

proptest! {
    #[test]
    fn f1_is_the_harmonic_mean(tp in 1usize..500, fp in 0usize..500, fn_ in 0usize..500) {
        let m = classification_metrics(tp, fp, fn_);
        let (p, r) = (m.precision.unwrap(), m.recall.unwrap());
        prop_assert!((m.f1.unwrap() - 2.0 * p * r / (p + r)).abs() <= 1e-12);
    }

    #[test]
    fn pareto_matches_brute_force(pts in proptest::collection::vec((0u8..12, 0u8..12), 1..60)) {
        // coarse integer grid forces plenty of ties
        let pts: Vec<(f64, f64)> = pts.iter().map(|&(a, b)| (a as f64, b as f64 / 10.0)).collect();
        prop_assert_eq!(pareto_front(&pts), common::brute_pareto(&pts));
    }

    #[test]
    fn pareto_is_permutation_stable(pts in proptest::collection::vec((0.0f64..30.0, 0.0f64..1.0), 1..40), rot in 0usize..40) {
        let flags = pareto_front(&pts);
        let k = rot % pts.len();
        let mut moved = pts.clone();
        moved.rotate_left(k);
        let mut back = pareto_front(&moved);
        back.rotate_right(k);
        prop_assert_eq!(flags, back);
    }

    #[test]
    fn outcomes_partition(first in proptest::option::of(0usize..100), leak in proptest::option::of(0usize..100)) {
        let c = classify(first, leak);
        match (first, leak) {
            (None, None) => prop_assert_eq!(c, Classification::CleanRun),
            (Some(a), Some(s)) if a >= s => prop_assert_eq!(c, Classification::TruePositive),
            (None, Some(_)) => prop_assert_eq!(c, Classification::FalseNegative),
            _ => prop_assert_eq!(c, Classification::FalsePositive),
        }
    }
}

#[test]
fn median_counts_misses_as_infinite() {
    let mk = |ttd: Option<i64>| leakid::eval::RunOutcome {
        leak_id: "l".into(),
        classification: if ttd.is_some() { Classification::TruePositive } else { Classification::FalsePositive },
        ttd: ttd.map(|s| leakid::cpd::TimeToDetection { seconds: s }),
        seed: 0,
        variant: Variant::Pinn,
        first_alarm: None,
        alarm_series: None,
    };
    assert_eq!(median_ttd_hours(&[mk(Some(3600)), mk(None), mk(Some(7200))]), 2.0);
    assert_eq!(median_ttd_hours(&[mk(Some(3600)), mk(None)]), f64::INFINITY);
}

fn short_abrupt(seed: u64) -> RunData {
    let truth = generate(&reference_scenario(ReferenceKind::DmaCAbrupt, seed)).unwrap();
    RunData::from_scenario(&truth, 0)
}

#[test]
fn sweep_reproduces_standalone_detection() {
    let data = short_abrupt(1);
    for variant in [Variant::Base, Variant::Fk] {
        for (slack, threshold) in [(0.5, 40.0), (1.0, 25.0), (0.25, 120.0)] {
            let config = RunConfig {
                detection: DetectionConfig {
                    slack,
                    threshold,
                    ..DetectionConfig::default()
                },
                ..RunConfig::default()
            };
            let run = run_variant(variant, &data, &config, 0).unwrap();
            let cells = sensitivity_sweep(std::slice::from_ref(&run.sweep_input), &[slack], &[threshold]).unwrap();
            assert_eq!(cells.len(), 1);
            let c = &cells[0];
            let expect = match run.outcome.classification {
                Classification::TruePositive => (1, 0, 0),
                Classification::FalsePositive => (0, 1, 0),
                Classification::FalseNegative => (0, 0, 1),
                Classification::CleanRun => (0, 0, 0),
            };
            assert_eq!((c.counts.tp, c.counts.fp, c.counts.fn_), expect, "{variant} δ={slack} ε={threshold}");
            assert_eq!(c.avg_ttd_hours, run.outcome.ttd.map(|t| t.hours()));
        }
    }
}

#[test]
fn sweep_grid_counts_and_threshold_monotonicity() {
    let inputs: Vec<_> = (0..3)
        .map(|s| run_variant(Variant::Fk, &short_abrupt(s), &RunConfig::default(), 0).unwrap().sweep_input)
        .collect();
    let deltas = grid(0.0, 2.0, 8);
    let eps = grid(20.0, 100.0, 8);
    let cells = sensitivity_sweep(&inputs, &deltas, &eps).unwrap();
    assert_eq!(cells.len(), 81);
    assert!(cells.iter().all(|c| c.counts.total() == inputs.len()));
    for row in cells.chunks(eps.len()) {
        let ttd: Vec<f64> = row.iter().filter_map(|c| c.avg_ttd_hours).collect();
        // with no true positive lost along the row the average cannot fall
        let tps: Vec<usize> = row.iter().map(|c| c.counts.tp).collect();
        if tps.windows(2).all(|w| w[0] == w[1]) {
            assert!(ttd.windows(2).all(|w| w[1] >= w[0]), "{ttd:?}");
        }
    }
    assert!(sensitivity_sweep(&inputs, &[], &eps).is_err());
}

#[test]
fn full_knowledge_on_a_noise_free_leak_free_scenario_is_silent() {
    let mut spec = reference_scenario(ReferenceKind::DmaCLeakFree, 5);
    spec.noise_sigma = 0.0;
    spec.diurnal.ar_sigma = 0.0;
    let truth = generate(&spec).unwrap();
    let data = RunData::from_scenario(&truth, 0);
    let run = run_variant(Variant::Fk, &data, &RunConfig::default(), 0).unwrap();
    assert!(run.mre.full.max_abs() <= 1e-9, "{}", run.mre.full.max_abs());
    assert!(run.detection.alarms.is_empty());
    assert_eq!(run.outcome.classification, Classification::CleanRun);
}
