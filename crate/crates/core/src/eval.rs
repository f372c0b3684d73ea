//! Run classification, performance metrics, repeated-run summaries,
//! slack/threshold sweeps and Pareto extraction.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::cpd::{detect, DetectMode, Detection, Monitor, Standardization, TimeToDetection, DEFAULT_MIN_STD};
use crate::demand_net::{self, NetConfig, TrainedModel};
use crate::error::{Error, Result};
use crate::ingest::PressurePanel;
use crate::regression::{fit_ols, reconstruction_error, CoefficientSet, DemandSet, MreSeries};
use crate::synth::ScenarioTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    /// Regression over measured demands only.
    Base,
    /// Regression plus the trained demand network.
    Pinn,
    /// Regression with the true latent demands revealed.
    Fk,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::Pinn, Variant::Fk];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Base => "BASE",
            Variant::Pinn => "PINN",
            Variant::Fk => "FK",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BASE" => Ok(Variant::Base),
            "PINN" => Ok(Variant::Pinn),
            "FK" => Ok(Variant::Fk),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    TruePositive,
    FalsePositive,
    FalseNegative,
    /// No leak defined and no alarm raised.
    CleanRun,
}

/// First alarm governs: before the leak is a false positive even if later
/// alarms would have caught it. Without a leak any alarm is a false positive.
pub fn classify(first_alarm: Option<usize>, leak_start: Option<usize>) -> Classification {
    match (first_alarm, leak_start) {
        (None, None) => Classification::CleanRun,
        (None, Some(_)) => Classification::FalseNegative,
        (Some(_), None) => Classification::FalsePositive,
        (Some(a), Some(s)) if a < s => Classification::FalsePositive,
        (Some(_), Some(_)) => Classification::TruePositive,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub leak_id: String,
    pub classification: Classification,
    pub ttd: Option<TimeToDetection>,
    pub seed: u64,
    pub variant: Variant,
    pub first_alarm: Option<DateTime<Utc>>,
    pub alarm_series: Option<String>,
}

impl RunOutcome {
    /// TTD in hours, with anything but a true positive mapped to +∞.
    pub fn ttd_hours_or_inf(&self) -> f64 {
        self.ttd.map_or(f64::INFINITY, |t| t.hours())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub clean: usize,
}

impl Counts {
    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a RunOutcome>) -> Self {
        let mut c = Counts::default();
        for o in outcomes {
            c.add(o.classification);
        }
        c
    }

    pub fn add(&mut self, class: Classification) {
        match class {
            Classification::TruePositive => self.tp += 1,
            Classification::FalsePositive => self.fp += 1,
            Classification::FalseNegative => self.fn_ += 1,
            Classification::CleanRun => self.clean += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.clean
    }

    pub fn metrics(&self) -> Metrics {
        classification_metrics(self.tp, self.fp, self.fn_)
    }
}

/// Undefined ratios are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn classification_metrics(tp: usize, fp: usize, fn_: usize) -> Metrics {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Metrics {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fn_ + fp),
    }
}

// ---------------------------------------------------------------------------
// Running one variant end to end

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub slack: f64,
    pub threshold: f64,
    pub mode: DetectMode,
    pub min_std: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            slack: 1.0,
            threshold: 300.0,
            mode: DetectMode::PerPair,
            min_std: DEFAULT_MIN_STD,
        }
    }
}

/// Everything a run needs about one scenario or dataset.
#[derive(Debug, Clone)]
pub struct RunData {
    pub panel: PressurePanel,
    /// Measured demand channels aligned with `panel`.
    pub known: DemandSet,
    /// True latent demands; required by the FK variant.
    pub latent_truth: Option<DemandSet>,
    /// Ids of the latent channels the network estimates.
    pub unknown_ids: Vec<String>,
    /// Training window `[0, train_end)`; evaluation runs from `train_end`.
    pub train_end: usize,
    /// Exclusive end of the evaluation window.
    pub eval_end: usize,
    pub leak_id: String,
    pub leak_start: Option<DateTime<Utc>>,
    pub gauge: usize,
}

impl RunData {
    pub fn validate(&self) -> Result<()> {
        let len = self.panel.len();
        if self.train_end == 0 || self.train_end >= self.eval_end || self.eval_end > len {
            return Err(Error::Range(format!(
                "windows [0, {}) and [{}, {}) do not fit a panel of {len} samples",
                self.train_end, self.train_end, self.eval_end
            )));
        }
        if let Some(s) = self.leak_start {
            if self.panel.axis().ceil_index(s) < self.train_end {
                return Err(Error::Config("training window overlaps the declared leak".into()));
            }
        }
        Ok(())
    }

    /// Train on the scenario's training window, evaluate on the rest, with
    /// the generator's latent demands available to the FK variant.
    pub fn from_scenario(truth: &ScenarioTruth, gauge: usize) -> Self {
        let latent = truth.unknown_demands();
        Self {
            panel: truth.panel.clone(),
            known: DemandSet::known_from_panel(&truth.panel),
            unknown_ids: latent.ids.clone(),
            latent_truth: Some(latent),
            train_end: truth.training_samples,
            eval_end: truth.panel.len(),
            leak_id: "leak".into(),
            leak_start: truth.leak_start,
            gauge,
        }
    }

    /// Leak start as an index into the evaluation window.
    pub fn leak_start_eval_index(&self) -> Option<usize> {
        self.leak_start
            .map(|s| self.panel.axis().ceil_index(s).saturating_sub(self.train_end))
    }

    fn training_panel(&self) -> Result<PressurePanel> {
        self.panel.slice_indices(0, self.train_end)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub detection: DetectionConfig,
}

/// A finished run: fitted models, the detection over the evaluation window
/// and its classification.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub outcome: RunOutcome,
    pub coeffs: CoefficientSet,
    pub model: Option<TrainedModel>,
    pub monitor: Monitor,
    pub mre: MreSeries,
    pub detection: Detection,
    /// Monitored series over the evaluation window, with their standardization.
    pub sweep_input: SweepInput,
}

/// Full-panel MRE for `variant`, together with its fitted coefficients.
pub fn variant_mre(
    variant: Variant,
    data: &RunData,
    net: &NetConfig,
    seed: u64,
) -> Result<(MreSeries, CoefficientSet, Option<TrainedModel>)> {
    data.validate()?;
    let train = data.training_panel()?;
    match variant {
        Variant::Base => {
            let c = fit_ols(&train, &data.known.slice(0, data.train_end), data.gauge)?;
            let mre = reconstruction_error(&c, &data.panel, &data.known)?;
            Ok((mre, c, None))
        }
        Variant::Fk => {
            let truth = data
                .latent_truth
                .as_ref()
                .ok_or_else(|| Error::Contract("the FK variant needs the true latent demands".into()))?;
            let all = data.known.clone().extend(truth.clone());
            let c = fit_ols(&train, &all.slice(0, data.train_end), data.gauge)?;
            let mre = reconstruction_error(&c, &data.panel, &all)?;
            Ok((mre, c, None))
        }
        Variant::Pinn => {
            let known_train = data.known.slice(0, data.train_end);
            let base = fit_ols(&train, &known_train, data.gauge)?;
            let model = demand_net::train(&train, &known_train, &base, &data.unknown_ids, net, seed)?;
            let mre = model.reconstruction_error(&data.panel, &data.known)?;
            let c = model.coeffs.clone();
            Ok((mre, c, Some(model)))
        }
    }
}

/// Fit, train if needed, predict, detect over the evaluation window, classify.
pub fn run_variant(variant: Variant, data: &RunData, config: &RunConfig, seed: u64) -> Result<VariantRun> {
    let (mre, coeffs, model) = variant_mre(variant, data, &config.net, seed)?;
    evaluate_mre(variant, data, &config.detection, seed, mre, coeffs, model)
}

/// Detection and classification for an already computed MRE.
pub fn evaluate_mre(
    variant: Variant,
    data: &RunData,
    detection: &DetectionConfig,
    seed: u64,
    mre: MreSeries,
    coeffs: CoefficientSet,
    model: Option<TrainedModel>,
) -> Result<VariantRun> {
    let training = mre.slice(0, data.train_end)?;
    let monitor = Monitor::fit(&training, data.panel.sensor_ids(), detection.mode, detection.min_std)?;
    let eval = mre.slice(data.train_end, data.eval_end)?;
    let det = detect(&eval, &monitor, detection.slack, detection.threshold)?;
    let first = det.first_alarm();
    let classification = classify(first.map(|a| a.index), data.leak_start_eval_index());
    let ttd = match (classification, first, data.leak_start) {
        (Classification::TruePositive, Some(a), Some(s)) => crate::cpd::time_to_detection(a.timestamp, s),
        _ => None,
    };
    let outcome = RunOutcome {
        leak_id: data.leak_id.clone(),
        classification,
        ttd,
        seed,
        variant,
        first_alarm: first.map(|a| a.timestamp),
        alarm_series: first.map(|a| a.series_id.clone()),
    };
    let sweep_input = SweepInput {
        series: monitor.monitored(&eval)?,
        stats: monitor.series_stats.clone(),
        leak_start: data.leak_start_eval_index(),
        leak_start_time: data.leak_start,
        axis: eval.axis,
    };
    Ok(VariantRun {
        outcome,
        coeffs,
        model,
        monitor,
        mre,
        detection: det,
        sweep_input,
    })
}

// ---------------------------------------------------------------------------
// Repeated runs

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

pub fn summarize(values: &[f64]) -> Option<DistributionSummary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(DistributionSummary {
        n: v.len(),
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    })
}

/// Median TTD in hours where runs without a true positive count as +∞.
pub fn median_ttd_hours(outcomes: &[RunOutcome]) -> f64 {
    let mut v: Vec<f64> = outcomes.iter().map(RunOutcome::ttd_hours_or_inf).collect();
    if v.is_empty() {
        return f64::INFINITY;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else if v[mid].is_infinite() {
        f64::INFINITY
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqSummary {
    pub leak_id: String,
    pub variant: Variant,
    pub counts: Counts,
    pub metrics: Metrics,
    /// TTD over true positives only, in hours.
    pub ttd_hours: Option<DistributionSummary>,
    pub outcomes: Vec<RunOutcome>,
}

pub fn uq_summary(leak_id: &str, variant: Variant, outcomes: Vec<RunOutcome>) -> UqSummary {
    let counts = Counts::from_outcomes(&outcomes);
    let ttd: Vec<f64> = outcomes.iter().filter_map(|o| o.ttd.map(|t| t.hours())).collect();
    UqSummary {
        leak_id: leak_id.to_string(),
        variant,
        counts,
        metrics: counts.metrics(),
        ttd_hours: summarize(&ttd),
        outcomes,
    }
}

/// Repeat `variant` over `seeds`, in order.
pub fn uncertainty_quantification(
    variant: Variant,
    data: &RunData,
    config: &RunConfig,
    seeds: &[u64],
) -> Result<(UqSummary, Vec<SweepInput>)> {
    if seeds.is_empty() {
        return Err(Error::Config("uncertainty quantification needs at least one run".into()));
    }
    let mut distinct = seeds.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != seeds.len() {
        return Err(Error::Config("seeds must be distinct".into()));
    }
    let mut outcomes = Vec::with_capacity(seeds.len());
    let mut inputs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run = run_variant(variant, data, config, seed)?;
        outcomes.push(run.outcome);
        inputs.push(run.sweep_input);
    }
    Ok((uq_summary(&data.leak_id, variant, outcomes), inputs))
}

// ---------------------------------------------------------------------------
// Sensitivity sweep

/// Monitored series of one run over its evaluation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepInput {
    pub series: Vec<Vec<f64>>,
    pub stats: Vec<Standardization>,
    pub leak_start: Option<usize>,
    pub leak_start_time: Option<DateTime<Utc>>,
    pub axis: crate::ingest::TimeAxis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub delta: f64,
    pub epsilon: f64,
    /// Mean TTD over true positives, in hours.
    pub avg_ttd_hours: Option<f64>,
    pub f1: Option<f64>,
    pub counts: Counts,
}

/// Running maximum of the two-sided statistic over all series: the first
/// alarm at threshold ε is the first index where it exceeds ε.
fn envelope(input: &SweepInput, delta: f64) -> Vec<f64> {
    let len = input.axis.len();
    let mut env = vec![f64::NEG_INFINITY; len];
    for (s, st) in input.series.iter().zip(&input.stats) {
        let (mut sp, mut sm) = (0.0f64, 0.0f64);
        for t in 0..len {
            let z = st.apply(s[t]);
            sp = (sp + z - delta).max(0.0);
            sm = (sm - z - delta).max(0.0);
            env[t] = env[t].max(sp.max(sm));
        }
    }
    let mut run = f64::NEG_INFINITY;
    for v in &mut env {
        run = run.max(*v);
        *v = run;
    }
    env
}

/// One cell per (δ, ε), aggregating every input; cells are ordered by δ, then ε.
pub fn sensitivity_sweep(inputs: &[SweepInput], deltas: &[f64], epsilons: &[f64]) -> Result<Vec<SweepCell>> {
    if deltas.is_empty() || epsilons.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if deltas.iter().any(|d| !(*d >= 0.0)) || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Config("sweep needs δ ≥ 0 and ε > 0".into()));
    }
    let mut counts = vec![Counts::default(); deltas.len() * epsilons.len()];
    let mut ttd_sum = vec![0.0; counts.len()];
    for input in inputs {
        for (a, &delta) in deltas.iter().enumerate() {
            let env = envelope(input, delta);
            for (b, &eps) in epsilons.iter().enumerate() {
                let k = a * epsilons.len() + b;
                let first = env.partition_point(|v| *v <= eps);
                let first = (first < env.len()).then_some(first);
                let class = classify(first, input.leak_start);
                counts[k].add(class);
                if class == Classification::TruePositive {
                    let t = input.axis.timestamp(first.expect("alarm"));
                    let start = input.leak_start_time.expect("leak");
                    ttd_sum[k] += crate::cpd::time_to_detection(t, start).expect("after start").hours();
                }
            }
        }
    }
    let mut cells = Vec::with_capacity(counts.len());
    for (a, &delta) in deltas.iter().enumerate() {
        for (b, &epsilon) in epsilons.iter().enumerate() {
            let k = a * epsilons.len() + b;
            let c = counts[k];
            cells.push(SweepCell {
                delta,
                epsilon,
                avg_ttd_hours: (c.tp > 0).then(|| ttd_sum[k] / c.tp as f64),
                f1: c.metrics().f1,
                counts: c,
            });
        }
    }
    Ok(cells)
}

/// `steps + 1` evenly spaced values from `lo` to `hi`.
pub fn grid(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps == 0 {
        return vec![lo];
    }
    (0..=steps)
        .map(|k| lo + (hi - lo) * k as f64 / steps as f64)
        .collect()
}

// ---------------------------------------------------------------------------
// Pareto front

/// True when `a` dominates `b` for (ttd ↓, f1 ↑).
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 >= b.1 && (a.0 < b.0 || a.1 > b.1)
}

/// Non-dominated flags for (ttd, f1) points.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    // by ttd ascending, f1 descending: a point is dominated iff an earlier
    // point has f1 at least as high and differs from it
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[b].1.total_cmp(&points[a].1))
    });
    let mut flags = vec![false; points.len()];
    let mut best: Option<(f64, f64)> = None;
    for &k in &order {
        let p = points[k];
        let dominated = match best {
            Some(b) => dominates(b, p),
            None => false,
        };
        flags[k] = !dominated;
        if best.is_none_or(|b| p.1 > b.1) {
            best = Some(p);
        }
    }
    flags
}

/// Pareto flags for sweep cells; cells without a defined TTD or F1 are never optimal.
pub fn pareto_cells(cells: &[SweepCell]) -> Vec<bool> {
    let defined: Vec<usize> = (0..cells.len())
        .filter(|&k| cells[k].avg_ttd_hours.is_some() && cells[k].f1.is_some())
        .collect();
    let points: Vec<(f64, f64)> = defined
        .iter()
        .map(|&k| (cells[k].avg_ttd_hours.unwrap(), cells[k].f1.unwrap()))
        .collect();
    let mut flags = vec![false; cells.len()];
    for (k, f) in defined.into_iter().zip(pareto_front(&points)) {
        flags[k] = f;
    }
    flags
}

// ---------------------------------------------------------------------------
// Demand recovery

/// Coefficient of determination of `estimate` against `truth`, each first
/// divided by its own maximum absolute value.
pub fn normalized_r2(estimate: &[f64], truth: &[f64]) -> Option<f64> {
    if estimate.len() != truth.len() || truth.is_empty() {
        return None;
    }
    let ne = estimate.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let nt = truth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if nt == 0.0 {
        return None;
    }
    let ne = if ne == 0.0 { 1.0 } else { ne };
    let mean = truth.iter().sum::<f64>() / nt / truth.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (e, t) in estimate.iter().zip(truth) {
        let (e, t) = (e / ne, t / nt);
        ss_res += (t - e).powi(2);
        ss_tot += (t - mean).powi(2);
    }
    (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot)
}

/// For each true channel, the best normalized R² over all estimated channels.
/// Estimated channels carry no inherent label, so they are matched greedily.
pub fn demand_recovery(estimates: &DemandSet, truth: &DemandSet) -> Vec<(String, Option<f64>)> {
    truth
        .ids
        .iter()
        .zip(&truth.values)
        .map(|(id, t)| {
            let best = estimates
                .values
                .iter()
                .filter_map(|e| normalized_r2(e, t))
                .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
            (id.clone(), best)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let m = classification_metrics(92, 7, 1);
        assert!((m.precision.unwrap() - 0.929_292_929).abs() < 1e-6);
        assert!((m.recall.unwrap() - 0.989_247_311).abs() < 1e-6);
        assert!((m.f1.unwrap() - 0.958_333_333).abs() < 1e-6);
        let m = classification_metrics(5, 0, 0);
        assert_eq!((m.precision, m.recall, m.f1), (Some(1.0), Some(1.0), Some(1.0)));
        let m = classification_metrics(0, 0, 0);
        assert_eq!((m.precision, m.recall, m.f1), (None, None, None));
    }

    #[test]
    fn classification_cases() {
        assert_eq!(classify(None, None), Classification::CleanRun);
        assert_eq!(classify(None, Some(5)), Classification::FalseNegative);
        assert_eq!(classify(Some(4), Some(5)), Classification::FalsePositive);
        assert_eq!(classify(Some(5), Some(5)), Classification::TruePositive);
        assert_eq!(classify(Some(3), None), Classification::FalsePositive);
    }

    #[test]
    fn table_three_front() {
        let pts = [(23.0, 0.990), (22.0, 0.985), (22.1, 0.985), (21.8, 0.974), (21.7, 0.969)];
        assert_eq!(pareto_front(&pts), vec![true, true, false, true, true]);
        assert_eq!(pareto_front(&[(1.0, 0.5)]), vec![true]);
    }

    #[test]
    fn duplicate_points_are_both_optimal() {
        assert_eq!(pareto_front(&[(2.0, 0.9), (2.0, 0.9)]), vec![true, true]);
    }

    #[test]
    fn summary_of_one_collapses() {
        let s = summarize(&[21.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.mean, s.q3, s.max), (21.0, 21.0, 21.0, 21.0, 21.0, 21.0));
        assert!(summarize(&[]).is_none());
        let s = summarize(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
    }

    #[test]
    fn median_with_missing_detections() {
        let o = |h: Option<i64>| RunOutcome {
            leak_id: "l".into(),
            classification: if h.is_some() {
                Classification::TruePositive
            } else {
                Classification::FalseNegative
            },
            ttd: h.map(|h| TimeToDetection { seconds: h * 3600 }),
            seed: 0,
            variant: Variant::Base,
            first_alarm: None,
            alarm_series: None,
        };
        assert_eq!(median_ttd_hours(&[o(Some(1)), o(Some(3)), o(None)]), 3.0);
        assert_eq!(median_ttd_hours(&[o(Some(1)), o(None)]), f64::INFINITY);
        assert_eq!(median_ttd_hours(&[o(Some(1)), o(Some(3))]), 2.0);
    }

    #[test]
    fn normalized_r2_is_scale_free() {
        let t = [0.0, 1.0, 2.0, 4.0];
        let e: Vec<f64> = t.iter().map(|v| 3.0 * v).collect();
        assert!((normalized_r2(&e, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(normalized_r2(&e, &[0.0; 4]).is_none());
    }

    #[test]
    fn grids() {
        let g = grid(0.0, 2.0, 8);
        assert_eq!(g.len(), 9);
        assert_eq!(g[8], 2.0);
        assert_eq!(grid(200.0, 400.0, 8)[1], 225.0);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("xyz".parse::<Variant>().is_err());
    }
}
