//! Pairwise linear pressure model.
//!
//! For every pair of sensors (i, j) the model states
//!
//! ```text
//! k0_i + k1_i·P_i + Σ_d kd_{d,i}·Q_d² = k0_j + k1_j·P_j + Σ_d kd_{d,j}·Q_d²
//! ```
//!
//! which is homogeneous in the coefficients. Global scaling and a global
//! intercept shift are fixed by pinning a reference sensor to k0 = 0, k1 = 1.
//! Coupling rows only enter through differences, so the fit additionally pins
//! each coupling of the reference sensor to zero.
//!
//! Solving the model for P_i from sensor j gives the estimate tensor
//! P̂[i][j][t]; its difference to the observation is the model
//! reconstruction error (MRE) used for detection.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{PressurePanel, TimeAxis};
use crate::linalg::StreamingQr;

/// Minimum admissible |k1| of any sensor.
pub const MIN_SLOPE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandKind {
    /// Measured channel, coefficients fitted by OLS.
    Known,
    /// Latent channel, coefficients trained together with the demand network.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub sensor_ids: Vec<String>,
    /// Index of the reference sensor (k0 = 0, k1 = 1).
    pub gauge: usize,
    pub k0: Vec<f64>,
    pub k1: Vec<f64>,
    pub demand_ids: Vec<String>,
    pub demand_kinds: Vec<DemandKind>,
    /// One row per demand channel, one entry per sensor.
    pub kd: Vec<Vec<f64>>,
    #[serde(default)]
    pub training_residual_rms: Option<f64>,
}

impl CoefficientSet {
    /// Coefficients of the trivial model in which every sensor sees the same head.
    pub fn identity(sensor_ids: Vec<String>) -> Self {
        let n = sensor_ids.len();
        Self {
            sensor_ids,
            gauge: 0,
            k0: vec![0.0; n],
            k1: vec![1.0; n],
            demand_ids: Vec::new(),
            demand_kinds: Vec::new(),
            kd: Vec::new(),
            training_residual_rms: None,
        }
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn n_demands(&self) -> usize {
        self.demand_ids.len()
    }

    pub fn demand_index(&self, id: &str) -> Option<usize> {
        self.demand_ids.iter().position(|d| d == id)
    }

    pub fn unknown_demands(&self) -> Vec<usize> {
        (0..self.n_demands())
            .filter(|&d| self.demand_kinds[d] == DemandKind::Unknown)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_sensors();
        if n < 2 {
            return Err(Error::Contract("coefficient set needs at least 2 sensors".into()));
        }
        if self.k0.len() != n || self.k1.len() != n {
            return Err(Error::Contract("k0/k1 length does not match sensor count".into()));
        }
        if self.gauge >= n {
            return Err(Error::Contract(format!("gauge index {} out of range", self.gauge)));
        }
        if self.demand_kinds.len() != self.demand_ids.len() || self.kd.len() != self.demand_ids.len()
        {
            return Err(Error::Contract("demand ids, kinds and kd rows disagree".into()));
        }
        if self.kd.iter().any(|row| row.len() != n) {
            return Err(Error::Contract("kd row length does not match sensor count".into()));
        }
        for (id, k1) in self.sensor_ids.iter().zip(&self.k1) {
            if !(k1.abs() >= MIN_SLOPE) {
                return Err(Error::DegenerateSensor {
                    sensor: id.clone(),
                    k1: *k1,
                });
            }
        }
        let all = self.k0.iter().chain(&self.k1).chain(self.kd.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// Append latent demand channels with zero couplings.
    pub fn with_unknown_demands<S: AsRef<str>>(mut self, ids: &[S]) -> Self {
        let n = self.n_sensors();
        for id in ids {
            self.demand_ids.push(id.as_ref().to_string());
            self.demand_kinds.push(DemandKind::Unknown);
            self.kd.push(vec![0.0; n]);
        }
        self
    }

    /// Drop the channels that are not measured.
    pub fn without_unknown_demands(&self) -> Self {
        let unknown: Vec<String> = self.unknown_demands().into_iter().map(|d| self.demand_ids[d].clone()).collect();
        self.without_demands(&unknown)
    }

    /// Drop the named channels.
    pub fn without_demands<S: AsRef<str>>(&self, ids: &[S]) -> Self {
        let mut out = self.clone();
        out.demand_ids.clear();
        out.demand_kinds.clear();
        out.kd.clear();
        for d in 0..self.n_demands() {
            if !ids.iter().any(|i| i.as_ref() == self.demand_ids[d]) {
                out.demand_ids.push(self.demand_ids[d].clone());
                out.demand_kinds.push(self.demand_kinds[d]);
                out.kd.push(self.kd[d].clone());
            }
        }
        out
    }

    /// Equivalent coefficients expressed in the gauge of `reference`:
    /// k1[r] = 1, k0[r] = 0 and kd[d][r] = 0 for every channel. Leaves all
    /// estimates P̂ unchanged.
    pub fn canonical(&self, reference: usize) -> Self {
        let scale = self.k1[reference];
        let shift = self.k0[reference] / scale;
        let mut out = self.clone();
        out.gauge = reference;
        for i in 0..self.n_sensors() {
            out.k1[i] = self.k1[i] / scale;
            out.k0[i] = self.k0[i] / scale - shift;
        }
        for (row_out, row) in out.kd.iter_mut().zip(&self.kd) {
            let base = row[reference] / scale;
            for (o, v) in row_out.iter_mut().zip(row) {
                *o = v / scale - base;
            }
        }
        out.k0[reference] = 0.0;
        out.k1[reference] = 1.0;
        for row in &mut out.kd {
            row[reference] = 0.0;
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    /// Estimate of sensor `i` from sensor `j`'s pressure `p_j` given squared
    /// demand flows aligned with `demand_ids`.
    #[inline]
    pub fn estimate(&self, i: usize, j: usize, p_j: f64, q_sq: &[f64]) -> f64 {
        let mut num = self.k0[j] - self.k0[i] + self.k1[j] * p_j;
        for (row, q2) in self.kd.iter().zip(q_sq) {
            num += (row[j] - row[i]) * q2;
        }
        num / self.k1[i]
    }
}

/// Demand flows aligned with a panel, one row per channel (m³/h).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DemandSet {
    pub ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl DemandSet {
    pub fn new(ids: Vec<String>, values: Vec<Vec<f64>>) -> Self {
        Self { ids, values }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn known_from_panel(panel: &PressurePanel) -> Self {
        Self {
            ids: panel.known_demands().iter().map(|c| c.id.clone()).collect(),
            values: panel.known_demands().iter().map(|c| c.values.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.ids
            .iter()
            .position(|d| d == id)
            .map(|k| self.values[k].as_slice())
    }

    pub fn extend(mut self, other: DemandSet) -> Self {
        self.ids.extend(other.ids);
        self.values.extend(other.values);
        self
    }

    pub fn slice(&self, from: usize, to: usize) -> Self {
        Self {
            ids: self.ids.clone(),
            values: self.values.iter().map(|v| v[from..to].to_vec()).collect(),
        }
    }

    fn check(&self, len: usize) -> Result<()> {
        for (id, v) in self.ids.iter().zip(&self.values) {
            if v.len() != len {
                return Err(Error::Contract(format!(
                    "demand '{id}' has {} samples, panel has {len}",
                    v.len()
                )));
            }
            if let Some(t) = v.iter().position(|q| !q.is_finite() || *q < 0.0) {
                return Err(Error::Contract(format!(
                    "demand '{id}' must be finite and non-negative (index {t})"
                )));
            }
        }
        Ok(())
    }

    /// Squared flows ordered like `coeffs.demand_ids`, as [t][d].
    fn squared_for(&self, coeffs: &CoefficientSet, len: usize) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<&[f64]> = coeffs
            .demand_ids
            .iter()
            .map(|id| {
                self.get(id)
                    .ok_or_else(|| Error::Contract(format!("missing demand channel '{id}'")))
            })
            .collect::<Result<_>>()?;
        for (id, r) in coeffs.demand_ids.iter().zip(&rows) {
            if r.len() != len {
                return Err(Error::Contract(format!("demand '{id}' length mismatch")));
            }
        }
        Ok((0..len)
            .map(|t| rows.iter().map(|r| r[t] * r[t]).collect())
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Design

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unknown {
    Intercept(usize),
    Slope(usize),
    Coupling { channel: usize, sensor: usize },
}

#[derive(Debug, Clone)]
struct Layout {
    columns: Vec<Unknown>,
    intercept: Vec<Option<usize>>,
    slope: Vec<Option<usize>>,
    coupling: Vec<Vec<Option<usize>>>,
}

impl Layout {
    fn new(n: usize, d: usize, gauge: usize, pin_couplings: bool) -> Self {
        let mut columns = Vec::new();
        let mut intercept = vec![None; n];
        let mut slope = vec![None; n];
        let mut coupling = vec![vec![None; n]; d];
        for (s, slot) in intercept.iter_mut().enumerate().filter(|(s, _)| *s != gauge) {
            *slot = Some(columns.len());
            columns.push(Unknown::Intercept(s));
        }
        for (s, slot) in slope.iter_mut().enumerate().filter(|(s, _)| *s != gauge) {
            *slot = Some(columns.len());
            columns.push(Unknown::Slope(s));
        }
        for (c, row) in coupling.iter_mut().enumerate() {
            for (s, slot) in row.iter_mut().enumerate() {
                if pin_couplings && s == gauge {
                    continue;
                }
                *slot = Some(columns.len());
                columns.push(Unknown::Coupling {
                    channel: c,
                    sensor: s,
                });
            }
        }
        Self {
            columns,
            intercept,
            slope,
            coupling,
        }
    }

    /// Emit one equation per unordered pair and timestep.
    fn for_each_row<F: FnMut(&[f64], f64)>(
        &self,
        pressures: &[Vec<f64>],
        q_sq: &[Vec<f64>],
        gauge: usize,
        mut f: F,
    ) {
        let n = pressures.len();
        let len = pressures[0].len();
        let mut row = vec![0.0; self.columns.len()];
        for i in 0..n {
            for j in i + 1..n {
                for t in 0..len {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    let mut constant = 0.0;
                    if let Some(c) = self.intercept[i] {
                        row[c] += 1.0;
                    }
                    if let Some(c) = self.intercept[j] {
                        row[c] -= 1.0;
                    }
                    match self.slope[i] {
                        Some(c) => row[c] += pressures[i][t],
                        None if i == gauge => constant += pressures[i][t],
                        None => {}
                    }
                    match self.slope[j] {
                        Some(c) => row[c] -= pressures[j][t],
                        None if j == gauge => constant -= pressures[j][t],
                        None => {}
                    }
                    for (d, cols) in self.coupling.iter().enumerate() {
                        let q2 = q_sq[d][t];
                        if let Some(c) = cols[i] {
                            row[c] += q2;
                        }
                        if let Some(c) = cols[j] {
                            row[c] -= q2;
                        }
                    }
                    f(&row, -constant);
                }
            }
        }
    }
}

/// Materialised linear system `A·θ = b` over the free coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub columns: Vec<Unknown>,
    /// Row-major, `rhs.len()` rows of `columns.len()` entries.
    pub entries: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.rhs.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.n_cols();
        &self.entries[k * w..(k + 1) * w]
    }
}

fn squared_rows(demands: &DemandSet, len: usize) -> Result<Vec<Vec<f64>>> {
    demands.check(len)?;
    Ok(demands
        .values
        .iter()
        .map(|v| v.iter().map(|q| q * q).collect())
        .collect())
}

fn materialise(
    panel: &PressurePanel,
    demands: &DemandSet,
    gauge: usize,
    pin: bool,
) -> Result<DesignMatrix> {
    if gauge >= panel.n_sensors() {
        return Err(Error::Contract(format!("gauge index {gauge} out of range")));
    }
    let q_sq = squared_rows(demands, panel.len())?;
    let layout = Layout::new(panel.n_sensors(), demands.len(), gauge, pin);
    let mut entries = Vec::new();
    let mut rhs = Vec::new();
    layout.for_each_row(panel.values(), &q_sq, gauge, |row, b| {
        entries.extend_from_slice(row);
        rhs.push(b);
    });
    Ok(DesignMatrix {
        columns: layout.columns,
        entries,
        rhs,
    })
}

/// Pairwise equations with only the reference sensor's k0 and k1 eliminated:
/// (2 + D)·N − 2 free unknowns.
pub fn design_rows(panel: &PressurePanel, demands: &DemandSet, gauge: usize) -> Result<DesignMatrix> {
    materialise(panel, demands, gauge, false)
}

/// The system [`fit_ols`] solves: [`design_rows`] with the reference
/// sensor's couplings additionally pinned to zero.
pub fn fit_system(panel: &PressurePanel, demands: &DemandSet, gauge: usize) -> Result<DesignMatrix> {
    materialise(panel, demands, gauge, true)
}

fn column_name(u: Unknown, sensors: &[String], demands: &[String]) -> String {
    match u {
        Unknown::Intercept(s) => format!("k0[{}]", sensors[s]),
        Unknown::Slope(s) => format!("k1[{}]", sensors[s]),
        Unknown::Coupling { channel, sensor } => {
            format!("kd[{}][{}]", demands[channel], sensors[sensor])
        }
    }
}

impl fmt::Display for Unknown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unknown::Intercept(s) => write!(f, "k0[{s}]"),
            Unknown::Slope(s) => write!(f, "k1[{s}]"),
            Unknown::Coupling { channel, sensor } => write!(f, "kd[{channel}][{sensor}]"),
        }
    }
}

/// Least-squares fit of the gauge-fixed pairwise model. `demands` are
/// treated as measured channels.
pub fn fit_ols(panel: &PressurePanel, demands: &DemandSet, gauge: usize) -> Result<CoefficientSet> {
    let n = panel.n_sensors();
    if gauge >= n {
        return Err(Error::Contract(format!("gauge index {gauge} out of range")));
    }
    let q_sq = squared_rows(demands, panel.len())?;
    let layout = Layout::new(n, demands.len(), gauge, true);
    let n_free = layout.columns.len();
    if panel.len() < n_free {
        return Err(Error::Contract(format!(
            "{} timesteps cannot determine {n_free} free coefficients",
            panel.len()
        )));
    }
    let mut qr = StreamingQr::new(n_free);
    layout.for_each_row(panel.values(), &q_sq, gauge, |row, b| qr.push_row(row, b));
    let sol = qr.solve().map_err(|cols| Error::SingularFit {
        columns: cols
            .into_iter()
            .map(|c| column_name(layout.columns[c], panel.sensor_ids(), &demands.ids))
            .collect(),
    })?;

    let mut k0 = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    k1[gauge] = 1.0;
    let mut kd = vec![vec![0.0; n]; demands.len()];
    for (u, v) in layout.columns.iter().zip(&sol.x) {
        match *u {
            Unknown::Intercept(s) => k0[s] = *v,
            Unknown::Slope(s) => k1[s] = *v,
            Unknown::Coupling { channel, sensor } => kd[channel][sensor] = *v,
        }
    }
    for (id, k) in panel.sensor_ids().iter().zip(&k1) {
        if k.abs() < MIN_SLOPE {
            return Err(Error::DegenerateSensor {
                sensor: id.clone(),
                k1: *k,
            });
        }
    }
    let rms = (sol.residual_sum_squares / sol.rows as f64).sqrt();
    log::debug!("OLS fit: {} rows, {n_free} unknowns, residual rms {rms:.3e}", sol.rows);
    Ok(CoefficientSet {
        sensor_ids: panel.sensor_ids().to_vec(),
        gauge,
        k0,
        k1,
        demand_ids: demands.ids.clone(),
        demand_kinds: vec![DemandKind::Known; demands.len()],
        kd,
        training_residual_rms: Some(rms),
    })
}

// ---------------------------------------------------------------------------
// Estimates and reconstruction error

/// Dense N×N×T tensor indexed `[i][j][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTensor {
    n: usize,
    len: usize,
    data: Vec<f64>,
}

impl PairTensor {
    fn zeros(n: usize, len: usize) -> Self {
        Self {
            n,
            len,
            data: vec![0.0; n * n * len],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, t: usize) -> f64 {
        self.data[(i * self.n + j) * self.len + t]
    }

    pub fn series(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.n + j) * self.len;
        &self.data[k..k + self.len]
    }

    fn series_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let k = (i * self.n + j) * self.len;
        &mut self.data[k..k + self.len]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// P̂[i][j][t]: sensor i estimated from sensor j. `demands` must provide
/// every channel named in `coeffs`.
pub fn predict_pressure(
    coeffs: &CoefficientSet,
    panel: &PressurePanel,
    demands: &DemandSet,
) -> Result<PairTensor> {
    coeffs.validate()?;
    if coeffs.sensor_ids != panel.sensor_ids() {
        return Err(Error::Contract("coefficient sensors do not match the panel".into()));
    }
    let len = panel.len();
    let q_sq = demands.squared_for(coeffs, len)?;
    let n = panel.n_sensors();
    let mut out = PairTensor::zeros(n, len);
    for i in 0..n {
        for j in 0..n {
            let p_j = panel.sensor(j);
            let dst = out.series_mut(i, j);
            if i == j {
                dst.copy_from_slice(p_j);
                continue;
            }
            for t in 0..len {
                dst[t] = coeffs.estimate(i, j, p_j[t], &q_sq[t]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MreSeries {
    pub axis: TimeAxis,
    /// `full[i][j][t] = P_i(t) − P̂[i][j][t]`.
    pub full: PairTensor,
    /// Unordered pairs monitored for detection (i < j).
    pub pair_index: Vec<(usize, usize)>,
    /// Raw MRE series per entry of `pair_index`.
    pub reduced: Vec<Vec<f64>>,
}

impl MreSeries {
    pub fn n_pairs(&self) -> usize {
        self.pair_index.len()
    }

    pub fn len(&self) -> usize {
        self.axis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axis.is_empty()
    }

    /// Restrict to timesteps `[from, to)`.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        let axis = self.axis.sub_axis(from, to)?;
        let n = self.full.n;
        let mut full = PairTensor::zeros(n, to - from);
        for i in 0..n {
            for j in 0..n {
                full.series_mut(i, j)
                    .copy_from_slice(&self.full.series(i, j)[from..to]);
            }
        }
        Ok(Self {
            axis,
            full,
            pair_index: self.pair_index.clone(),
            reduced: self.reduced.iter().map(|r| r[from..to].to_vec()).collect(),
        })
    }

    pub fn pair_label(&self, k: usize, sensor_ids: &[String]) -> String {
        let (i, j) = self.pair_index[k];
        format!("{}~{}", sensor_ids[i], sensor_ids[j])
    }
}

/// MRE = P_obs ⊗ 1 − P̂.
pub fn model_reconstruction_error(panel: &PressurePanel, estimate: &PairTensor) -> Result<MreSeries> {
    let n = panel.n_sensors();
    let len = panel.len();
    if estimate.n != n || estimate.len != len {
        return Err(Error::Contract(format!(
            "estimate shape {}×{}×{} does not match panel {n}×{n}×{len}",
            estimate.n, estimate.n, estimate.len
        )));
    }
    let mut full = PairTensor::zeros(n, len);
    for i in 0..n {
        let p_i = panel.sensor(i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let est = estimate.series(i, j);
            let dst = full.series_mut(i, j);
            for t in 0..len {
                dst[t] = p_i[t] - est[t];
            }
        }
    }
    let pair_index: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let reduced = pair_index
        .iter()
        .map(|&(i, j)| full.series(i, j).to_vec())
        .collect();
    Ok(MreSeries {
        axis: *panel.axis(),
        full,
        pair_index,
        reduced,
    })
}

/// Shortcut for [`predict_pressure`] followed by [`model_reconstruction_error`].
pub fn reconstruction_error(
    coeffs: &CoefficientSet,
    panel: &PressurePanel,
    demands: &DemandSet,
) -> Result<MreSeries> {
    let est = predict_pressure(coeffs, panel, demands)?;
    model_reconstruction_error(panel, &est)
}
