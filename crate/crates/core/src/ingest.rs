//! Loading, validation, windowing and scaling of pressure time series.
//!
//! A [`PressurePanel`] is the aligned N×T pressure matrix plus any measured
//! demand channels. Panels are immutable once built; slicing produces a new
//! panel whose values are copied bit-for-bit from the source rows.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, FixedOffset, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical sampling step of the benchmark data (five minutes).
pub const DEFAULT_STEP_SECONDS: i64 = 300;

/// A uniform time grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeAxis {
    start: DateTime<Utc>,
    step_seconds: i64,
    len: usize,
}

impl TimeAxis {
    pub fn new(start: DateTime<Utc>, step_seconds: i64, len: usize) -> Result<Self> {
        if step_seconds <= 0 {
            return Err(Error::Alignment(format!(
                "time step must be positive, got {step_seconds} s"
            )));
        }
        if len == 0 {
            return Err(Error::Range("time axis must have at least one sample".into()));
        }
        Ok(Self {
            start,
            step_seconds,
            len,
        })
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn step_seconds(&self) -> i64 {
        self.step_seconds
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn timestamp(&self, index: usize) -> DateTime<Utc> {
        self.start + Duration::seconds(self.step_seconds * index as i64)
    }

    /// Exclusive end of the axis.
    pub fn end(&self) -> DateTime<Utc> {
        self.timestamp(self.len)
    }

    /// Grid index of `ts`, allowing the exclusive end (`== len`).
    /// Returns `None` when `ts` is off-grid or outside `[start, end]`.
    pub fn index_of(&self, ts: DateTime<Utc>) -> Option<usize> {
        let offset = (ts - self.start).num_seconds();
        if offset < 0 || offset % self.step_seconds != 0 {
            return None;
        }
        let idx = (offset / self.step_seconds) as usize;
        (idx <= self.len).then_some(idx)
    }

    /// First grid index at or after `ts`, clamped to `len`.
    pub fn ceil_index(&self, ts: DateTime<Utc>) -> usize {
        let offset = (ts - self.start).num_seconds();
        if offset <= 0 {
            return 0;
        }
        let idx = (offset + self.step_seconds - 1) / self.step_seconds;
        (idx as usize).min(self.len)
    }

    pub fn sub_axis(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.len {
            return Err(Error::Range(format!(
                "invalid index range [{from}, {to}) for axis of length {}",
                self.len
            )));
        }
        TimeAxis::new(self.timestamp(from), self.step_seconds, to - from)
    }
}

/// A measured (known) demand channel aligned to the panel axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandChannel {
    pub id: String,
    pub values: Vec<f64>,
}

/// Declared physical units; recorded, never inferred.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Units {
    #[serde(default = "default_pressure_unit")]
    pub pressure: String,
    #[serde(default = "default_flow_unit")]
    pub flow: String,
}

fn default_pressure_unit() -> String {
    "m".into()
}

fn default_flow_unit() -> String {
    "m3/h".into()
}

impl Default for Units {
    fn default() -> Self {
        Self {
            pressure: default_pressure_unit(),
            flow: default_flow_unit(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PressurePanel {
    axis: TimeAxis,
    sensor_ids: Vec<String>,
    values: Vec<Vec<f64>>,
    known_demands: Vec<DemandChannel>,
    units: Units,
}

impl PressurePanel {
    pub fn new(
        axis: TimeAxis,
        sensor_ids: Vec<String>,
        values: Vec<Vec<f64>>,
        known_demands: Vec<DemandChannel>,
    ) -> Result<Self> {
        if sensor_ids.len() < 2 {
            return Err(Error::Contract(format!(
                "a panel needs at least 2 sensors, got {}",
                sensor_ids.len()
            )));
        }
        if values.len() != sensor_ids.len() {
            return Err(Error::Contract(format!(
                "{} sensor ids but {} value rows",
                sensor_ids.len(),
                values.len()
            )));
        }
        for (id, row) in sensor_ids.iter().zip(&values) {
            check_row(id, row, axis.len())?;
        }
        for ch in &known_demands {
            check_row(&ch.id, &ch.values, axis.len())?;
        }
        let mut seen = std::collections::HashSet::new();
        for id in sensor_ids.iter().chain(known_demands.iter().map(|c| &c.id)) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Contract(format!("duplicate channel id '{id}'")));
            }
        }
        Ok(Self {
            axis,
            sensor_ids,
            values,
            known_demands,
            units: Units::default(),
        })
    }

    pub fn with_units(mut self, units: Units) -> Self {
        self.units = units;
        self
    }

    pub fn axis(&self) -> &TimeAxis {
        &self.axis
    }

    pub fn sensor_ids(&self) -> &[String] {
        &self.sensor_ids
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn len(&self) -> usize {
        self.axis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axis.is_empty()
    }

    /// Pressure rows, one per sensor.
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn sensor(&self, index: usize) -> &[f64] {
        &self.values[index]
    }

    pub fn known_demands(&self) -> &[DemandChannel] {
        &self.known_demands
    }

    pub fn units(&self) -> &Units {
        &self.units
    }

    /// Pressures at timestep `t` across all sensors.
    pub fn column(&self, t: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[t]).collect()
    }

    /// Sub-panel over index range `[from, to)`.
    pub fn slice_indices(&self, from: usize, to: usize) -> Result<Self> {
        let axis = self.axis.sub_axis(from, to)?;
        Ok(Self {
            axis,
            sensor_ids: self.sensor_ids.clone(),
            values: self.values.iter().map(|r| r[from..to].to_vec()).collect(),
            known_demands: self
                .known_demands
                .iter()
                .map(|c| DemandChannel {
                    id: c.id.clone(),
                    values: c.values[from..to].to_vec(),
                })
                .collect(),
            units: self.units.clone(),
        })
    }

    /// Copy of the panel without its measured demand channels.
    pub fn without_known_demands(&self) -> Self {
        Self {
            known_demands: Vec::new(),
            ..self.clone()
        }
    }
}

fn check_row(id: &str, row: &[f64], len: usize) -> Result<()> {
    if row.len() != len {
        return Err(Error::Contract(format!(
            "channel '{id}' has {} samples, axis has {len}",
            row.len()
        )));
    }
    if let Some(t) = row.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "channel '{id}' has a non-finite value at index {t}"
        )));
    }
    Ok(())
}

/// Sub-panel covering `[start, end)`. Both bounds must sit on the grid.
pub fn slice_window(
    panel: &PressurePanel,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Result<PressurePanel> {
    if start >= end {
        return Err(Error::Range(format!(
            "window start {start} is not before end {end}"
        )));
    }
    let axis = panel.axis();
    if start < axis.start() || end > axis.end() {
        return Err(Error::Range(format!(
            "window [{start}, {end}) outside panel range [{}, {})",
            axis.start(),
            axis.end()
        )));
    }
    let from = axis
        .index_of(start)
        .ok_or_else(|| Error::Alignment(format!("window start {start} is off-grid")))?;
    let to = axis
        .index_of(end)
        .ok_or_else(|| Error::Alignment(format!("window end {end} is off-grid")))?;
    panel.slice_indices(from, to)
}

// ---------------------------------------------------------------------------
// CSV schema and loading

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Pressure,
    KnownDemand,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: ColumnRole,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapPolicy {
    #[default]
    Strict,
    Ffill,
}

/// Column-mapping configuration for [`load_pressure_panel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSchema {
    pub timestamp_column: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Values use ',' as the decimal separator (BattLeDIM exports).
    #[serde(default)]
    pub decimal_comma: bool,
    /// chrono format string for timestamps without an offset.
    #[serde(default)]
    pub timestamp_format: Option<String>,
    /// Offset of naive input timestamps from UTC, in minutes.
    #[serde(default)]
    pub utc_offset_minutes: i32,
    #[serde(default)]
    pub gap_policy: GapPolicy,
    #[serde(default)]
    pub units: Units,
    pub columns: Vec<ColumnSpec>,
}

fn default_delimiter() -> char {
    ','
}

impl PanelSchema {
    pub fn new(timestamp_column: impl Into<String>) -> Self {
        Self {
            timestamp_column: timestamp_column.into(),
            delimiter: ',',
            decimal_comma: false,
            timestamp_format: None,
            utc_offset_minutes: 0,
            gap_policy: GapPolicy::Strict,
            units: Units::default(),
            columns: Vec::new(),
        }
    }

    pub fn with_column(mut self, name: impl Into<String>, role: ColumnRole) -> Self {
        self.columns.push(ColumnSpec {
            name: name.into(),
            role,
        });
        self
    }

    pub fn with_pressures<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        for n in names {
            self = self.with_column(n.as_ref(), ColumnRole::Pressure);
        }
        self
    }

    /// Schema matching the layout produced by [`write_panel`].
    pub fn for_panel(panel: &PressurePanel) -> Self {
        let mut schema = PanelSchema::new("timestamp").with_pressures(panel.sensor_ids());
        for ch in panel.known_demands() {
            schema = schema.with_column(&ch.id, ColumnRole::KnownDemand);
        }
        schema.units = panel.units().clone();
        schema
    }

    fn validate(&self) -> Result<()> {
        let n_pressure = self
            .columns
            .iter()
            .filter(|c| c.role == ColumnRole::Pressure)
            .count();
        if n_pressure < 2 {
            return Err(Error::Config(format!(
                "schema must name at least 2 pressure columns, got {n_pressure}"
            )));
        }
        if !self.delimiter.is_ascii() {
            return Err(Error::Config("delimiter must be an ASCII character".into()));
        }
        if self.decimal_comma && self.delimiter == ',' {
            return Err(Error::Config(
                "decimal_comma requires a delimiter other than ','".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

const NAIVE_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
    "%d/%m/%Y %H:%M",
];

pub fn parse_timestamp(
    raw: &str,
    format: Option<&str>,
    utc_offset_minutes: i32,
) -> std::result::Result<DateTime<Utc>, String> {
    let raw = raw.trim();
    if let Ok(ts) = DateTime::parse_from_rfc3339(raw) {
        return Ok(ts.with_timezone(&Utc));
    }
    let offset = FixedOffset::east_opt(utc_offset_minutes * 60)
        .ok_or_else(|| format!("invalid UTC offset {utc_offset_minutes} min"))?;
    let naive = match format {
        Some(f) => NaiveDateTime::parse_from_str(raw, f).ok(),
        None => NAIVE_FORMATS
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok()),
    }
    .ok_or_else(|| format!("unparsable timestamp '{raw}'"))?;
    offset
        .from_local_datetime(&naive)
        .single()
        .map(|ts| ts.with_timezone(&Utc))
        .ok_or_else(|| format!("ambiguous timestamp '{raw}'"))
}

fn parse_cell(raw: &str, decimal_comma: bool) -> std::result::Result<Option<f64>, String> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("nan") || raw.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    let parsed = if decimal_comma {
        raw.replace(',', ".").parse::<f64>()
    } else {
        raw.parse::<f64>()
    };
    match parsed {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Err(format!("non-finite value '{raw}'")),
        Err(_) => Err(format!("invalid number '{raw}'")),
    }
}

/// Load a panel from a delimited text file according to `schema`.
pub fn load_pressure_panel(path: &Path, schema: &PanelSchema) -> Result<PressurePanel> {
    let file = File::open(path)?;
    read_pressure_panel(file, schema)
}

pub fn read_pressure_panel<R: std::io::Read>(
    reader: R,
    schema: &PanelSchema,
) -> Result<PressurePanel> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Config(format!("column '{name}' not found in header")))
    };
    let ts_col = position(&schema.timestamp_column)?;
    let mut pressure_cols = Vec::new();
    let mut demand_cols = Vec::new();
    for spec in &schema.columns {
        match spec.role {
            ColumnRole::Pressure => pressure_cols.push((spec.name.clone(), position(&spec.name)?)),
            ColumnRole::KnownDemand => demand_cols.push((spec.name.clone(), position(&spec.name)?)),
            ColumnRole::Ignore => {}
        }
    }
    let wanted: Vec<(String, usize)> = pressure_cols.iter().chain(&demand_cols).cloned().collect();

    let mut stamps: Vec<DateTime<Utc>> = Vec::new();
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    let mut filled = 0usize;
    for (row_idx, record) in rdr.records().enumerate() {
        let line = row_idx + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let ts = parse_timestamp(
            &record[ts_col],
            schema.timestamp_format.as_deref(),
            schema.utc_offset_minutes,
        )
        .map_err(|message| Error::Parse { line, message })?;
        stamps.push(ts);
        for (k, (name, col)) in wanted.iter().enumerate() {
            let cell = parse_cell(&record[*col], schema.decimal_comma)
                .map_err(|message| Error::Parse { line, message })?;
            let value = match (cell, schema.gap_policy) {
                (Some(v), _) => v,
                (None, GapPolicy::Ffill) if !data[k].is_empty() => {
                    filled += 1;
                    *data[k].last().expect("non-empty")
                }
                (None, _) => {
                    return Err(Error::Gap {
                        column: name.clone(),
                        line,
                    })
                }
            };
            data[k].push(value);
        }
    }
    if filled > 0 {
        log::info!("forward-filled {filled} missing cells");
    }
    if stamps.is_empty() {
        return Err(Error::Range("no data rows".into()));
    }
    let step = if stamps.len() > 1 {
        (stamps[1] - stamps[0]).num_seconds()
    } else {
        DEFAULT_STEP_SECONDS
    };
    for (k, pair) in stamps.windows(2).enumerate() {
        let dt = (pair[1] - pair[0]).num_seconds();
        if dt <= 0 {
            return Err(Error::Alignment(format!(
                "timestamps not strictly increasing at line {} ({} after {})",
                k + 3,
                pair[1],
                pair[0]
            )));
        }
        if dt != step {
            return Err(Error::Alignment(format!(
                "non-uniform step at line {}: {dt} s, expected {step} s",
                k + 3
            )));
        }
    }
    let axis = TimeAxis::new(stamps[0], step, stamps.len())?;
    let n_pressure = pressure_cols.len();
    let mut data = data.into_iter();
    let values: Vec<Vec<f64>> = data.by_ref().take(n_pressure).collect();
    let known: Vec<DemandChannel> = demand_cols
        .iter()
        .zip(data)
        .map(|((id, _), values)| DemandChannel {
            id: id.clone(),
            values,
        })
        .collect();
    let ids = pressure_cols.into_iter().map(|(n, _)| n).collect();
    Ok(PressurePanel::new(axis, ids, values, known)?.with_units(schema.units.clone()))
}

/// Write a panel in the layout [`load_pressure_panel`] reads with
/// [`PanelSchema::for_panel`]. Floats use shortest round-trip formatting.
pub fn write_panel(panel: &PressurePanel, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_panel_to(panel, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_panel_to<W: Write>(panel: &PressurePanel, out: &mut W) -> Result<()> {
    write!(out, "timestamp")?;
    for id in panel.sensor_ids() {
        write!(out, ",{id}")?;
    }
    for ch in panel.known_demands() {
        write!(out, ",{}", ch.id)?;
    }
    writeln!(out)?;
    for t in 0..panel.len() {
        write!(out, "{}", format_timestamp(panel.axis().timestamp(t)))?;
        for row in panel.values() {
            write!(out, ",{}", row[t])?;
        }
        for ch in panel.known_demands() {
            write!(out, ",{}", ch.values[t])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

// ---------------------------------------------------------------------------
// Max-abs scaling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub per_channel_max_abs: Vec<f64>,
}

impl ScaleRecord {
    pub fn scale(&self, channel: usize, series: &[f64]) -> Vec<f64> {
        let m = self.per_channel_max_abs[channel];
        series.iter().map(|v| v / m).collect()
    }

    pub fn unscale(&self, channel: usize, scaled: &[f64]) -> Vec<f64> {
        let m = self.per_channel_max_abs[channel];
        scaled.iter().map(|v| v * m).collect()
    }
}

fn max_abs(series: &[f64]) -> Result<f64> {
    let mut m = 0.0f64;
    for (t, v) in series.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite value at index {t}")));
        }
        m = m.max(v.abs());
    }
    Ok(if m == 0.0 { 1.0 } else { m })
}

/// Divide by the largest magnitude. All-zero input keeps a sentinel scale of 1.
pub fn max_abs_scale(series: &[f64]) -> Result<(Vec<f64>, ScaleRecord)> {
    let m = max_abs(series)?;
    let record = ScaleRecord {
        per_channel_max_abs: vec![m],
    };
    Ok((record.scale(0, series), record))
}

/// Channel-wise version of [`max_abs_scale`].
pub fn max_abs_scale_channels(channels: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, ScaleRecord)> {
    let per_channel_max_abs = channels
        .iter()
        .map(|c| max_abs(c))
        .collect::<Result<Vec<_>>>()?;
    let record = ScaleRecord {
        per_channel_max_abs,
    };
    let scaled = channels
        .iter()
        .enumerate()
        .map(|(k, c)| record.scale(k, c))
        .collect();
    Ok((scaled, record))
}
