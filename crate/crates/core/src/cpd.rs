//! Two-sided CUSUM change-point detection on standardized MRE series.

use std::io::Write;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{format_timestamp, TimeAxis};
use crate::regression::MreSeries;

/// Default lower bound on a training-window standard deviation (meters head).
pub const DEFAULT_MIN_STD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub const UNIT: Standardization = Standardization { mean: 0.0, std: 1.0 };

    /// Mean and population standard deviation of `series`, with the standard
    /// deviation floored at `min_std`.
    pub fn fit(series: &[f64], min_std: f64) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::Config("cannot standardize an empty series".into()));
        }
        let n = series.len() as f64;
        let mean = series.iter().sum::<f64>() / n;
        let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(min_std);
        if !(std > 0.0) || !mean.is_finite() {
            return Err(Error::Config(format!(
                "training series has zero or non-finite variance (mean {mean}, std {std})"
            )));
        }
        Ok(Self { mean, std })
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CusumConfig {
    /// δ, in standardized units.
    pub slack: f64,
    /// ε, in standardized units.
    pub threshold: f64,
    pub standardization: Standardization,
}

impl CusumConfig {
    pub fn new(slack: f64, threshold: f64, standardization: Standardization) -> Result<Self> {
        let c = Self {
            slack,
            threshold,
            standardization,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slack >= 0.0 && self.slack.is_finite()) {
            return Err(Error::Config(format!("slack must be >= 0, got {}", self.slack)));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config(format!(
                "threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if !(self.standardization.std > 0.0) {
            return Err(Error::Config("standardization std must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CusumTrace {
    pub axis: TimeAxis,
    pub s_plus: Vec<f64>,
    pub s_minus: Vec<f64>,
    /// Index of the first sample where max(s⁺, s⁻) > ε.
    pub first_alarm: Option<usize>,
    /// Every upward crossing of ε, including the first.
    pub crossings: Vec<usize>,
}

impl CusumTrace {
    pub fn first_alarm_time(&self) -> Option<DateTime<Utc>> {
        self.first_alarm.map(|i| self.axis.timestamp(i))
    }

    pub fn statistic(&self, t: usize) -> f64 {
        self.s_plus[t].max(self.s_minus[t])
    }
}

/// Two-sided CUSUM over `series`, which must share `axis`.
pub fn cusum_run(series: &[f64], axis: &TimeAxis, config: &CusumConfig) -> Result<CusumTrace> {
    config.validate()?;
    if series.len() != axis.len() {
        return Err(Error::Contract(format!(
            "series has {} samples, axis has {}",
            series.len(),
            axis.len()
        )));
    }
    let (mut sp, mut sm) = (0.0f64, 0.0f64);
    let mut s_plus = Vec::with_capacity(series.len());
    let mut s_minus = Vec::with_capacity(series.len());
    let mut first_alarm = None;
    let mut crossings = Vec::new();
    let mut above = false;
    for (t, &x) in series.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite sample at index {t}")));
        }
        let z = config.standardization.apply(x);
        sp = (sp + z - config.slack).max(0.0);
        sm = (sm - z - config.slack).max(0.0);
        s_plus.push(sp);
        s_minus.push(sm);
        let now_above = sp.max(sm) > config.threshold;
        if now_above && !above {
            crossings.push(t);
            first_alarm.get_or_insert(t);
        }
        above = now_above;
    }
    Ok(CusumTrace {
        axis: *axis,
        s_plus,
        s_minus,
        first_alarm,
        crossings,
    })
}

// ---------------------------------------------------------------------------
// Monitoring of MRE series

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectMode {
    /// One detector per unordered sensor pair; the earliest alarm wins.
    #[default]
    PerPair,
    /// A single detector on the mean of the standardized pair series.
    Mean,
}

/// Standardizations frozen from a leak-free window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    pub mode: DetectMode,
    pub labels: Vec<String>,
    pub pair_stats: Vec<Standardization>,
    /// Standardization of each monitored series, in the order of `labels`.
    pub series_stats: Vec<Standardization>,
}

impl Monitor {
    pub fn fit(
        training: &MreSeries,
        sensor_ids: &[String],
        mode: DetectMode,
        min_std: f64,
    ) -> Result<Self> {
        let pair_stats = training
            .reduced
            .iter()
            .map(|s| Standardization::fit(s, min_std))
            .collect::<Result<Vec<_>>>()?;
        let pair_labels: Vec<String> = (0..training.n_pairs())
            .map(|k| training.pair_label(k, sensor_ids))
            .collect();
        let mut monitor = Self {
            mode,
            labels: Vec::new(),
            pair_stats,
            series_stats: Vec::new(),
        };
        match mode {
            DetectMode::PerPair => {
                monitor.labels = pair_labels;
                monitor.series_stats = monitor.pair_stats.clone();
            }
            DetectMode::Mean => {
                let mean = monitor.pair_mean(training);
                monitor.labels = vec!["mean".into()];
                monitor.series_stats = vec![Standardization::fit(&mean, min_std)?];
            }
        }
        Ok(monitor)
    }

    fn pair_mean(&self, mre: &MreSeries) -> Vec<f64> {
        let k = mre.n_pairs() as f64;
        (0..mre.len())
            .map(|t| {
                mre.reduced
                    .iter()
                    .zip(&self.pair_stats)
                    .map(|(s, st)| st.apply(s[t]))
                    .sum::<f64>()
                    / k
            })
            .collect()
    }

    /// Raw monitored series (before their own standardization).
    pub fn monitored(&self, mre: &MreSeries) -> Result<Vec<Vec<f64>>> {
        if mre.n_pairs() != self.pair_stats.len() {
            return Err(Error::Contract(format!(
                "monitor expects {} pairs, MRE has {}",
                self.pair_stats.len(),
                mre.n_pairs()
            )));
        }
        Ok(match self.mode {
            DetectMode::PerPair => mre.reduced.clone(),
            DetectMode::Mean => vec![self.pair_mean(mre)],
        })
    }

    /// Monitored series mapped to standardized units.
    pub fn standardized(&self, mre: &MreSeries) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .monitored(mre)?
            .into_iter()
            .zip(&self.series_stats)
            .map(|(s, st)| s.iter().map(|x| st.apply(*x)).collect())
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub timestamp: DateTime<Utc>,
    pub index: usize,
    pub series_id: String,
    pub statistic: f64,
    pub slack: f64,
    pub threshold: f64,
    /// True only for the earliest alarm across all monitored series.
    pub first: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub alarms: Vec<Alarm>,
    pub traces: Vec<(String, CusumTrace)>,
}

impl Detection {
    pub fn first_alarm(&self) -> Option<&Alarm> {
        self.alarms.iter().find(|a| a.first)
    }
}

/// Run a CUSUM detector per monitored series of `mre`.
pub fn detect(mre: &MreSeries, monitor: &Monitor, slack: f64, threshold: f64) -> Result<Detection> {
    let series = monitor.monitored(mre)?;
    let mut traces = Vec::with_capacity(series.len());
    let mut alarms = Vec::new();
    for ((label, s), st) in monitor.labels.iter().zip(&series).zip(&monitor.series_stats) {
        let config = CusumConfig::new(slack, threshold, *st)?;
        let trace = cusum_run(s, &mre.axis, &config)?;
        for &t in &trace.crossings {
            alarms.push(Alarm {
                timestamp: mre.axis.timestamp(t),
                index: t,
                series_id: label.clone(),
                statistic: trace.statistic(t),
                slack,
                threshold,
                first: false,
            });
        }
        traces.push((label.clone(), trace));
    }
    // earliest index wins; ties resolved by larger statistic, then series order
    alarms.sort_by(|a, b| {
        a.index
            .cmp(&b.index)
            .then(b.statistic.total_cmp(&a.statistic))
    });
    if let Some(a) = alarms.first_mut() {
        a.first = true;
    }
    Ok(Detection { alarms, traces })
}

pub fn write_alarm_csv<W: Write>(alarms: &[Alarm], out: &mut W) -> Result<()> {
    writeln!(out, "timestamp,series_id,statistic,delta,epsilon,first")?;
    for a in alarms {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            format_timestamp(a.timestamp),
            a.series_id,
            a.statistic,
            a.slack,
            a.threshold,
            a.first
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Time to detection

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeToDetection {
    pub seconds: i64,
}

impl TimeToDetection {
    pub fn hours(&self) -> f64 {
        self.seconds as f64 / 3600.0
    }

    pub fn days(&self) -> f64 {
        self.seconds as f64 / 86_400.0
    }

    pub fn duration(&self) -> Duration {
        Duration::seconds(self.seconds)
    }
}

/// `t_d − t_start`; `None` when the alarm precedes the leak (a false positive).
pub fn time_to_detection(t_d: DateTime<Utc>, t_start: DateTime<Utc>) -> Option<TimeToDetection> {
    let seconds = (t_d - t_start).num_seconds();
    (seconds >= 0).then_some(TimeToDetection { seconds })
}
