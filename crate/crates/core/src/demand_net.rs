//! Physics-informed estimator of unknown irregular demands.
//!
//! A small fully connected network maps observed pressures to non-negative
//! demand estimates. It has no labels: its outputs are squared, fed through
//! the pairwise regression model together with trainable couplings, and the
//! network is trained to minimise the mean squared reconstruction error.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::PressurePanel;
use crate::regression::{CoefficientSet, DemandKind, DemandSet, MreSeries};

pub const BN_EPSILON: f64 = 1e-5;
pub const N_FOLDS: usize = 5;
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    #[inline]
    fn apply(self, y: f64) -> f64 {
        match self {
            Activation::Relu => y.max(0.0),
            Activation::LeakyRelu { slope } => {
                if y > 0.0 {
                    y
                } else {
                    slope * y
                }
            }
        }
    }

    #[inline]
    fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if y > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

/// Network and optimisation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stop after this many epochs without validation improvement.
    pub patience: usize,
    /// Feed measured demand channels to the network alongside pressures.
    pub include_known_demands: bool,
    pub regression: RegressionTraining,
    /// Rounds of OLS refits with the network estimates as regressors; each
    /// round but the last is followed by retraining on the refit coefficients.
    pub refit_rounds: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            hidden_width: 32,
            activation: Activation::LeakyRelu { slope: 0.01 },
            batch_norm: true,
            bn_momentum: 0.1,
            learning_rate: 3e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            include_known_demands: true,
            regression: RegressionTraining::CouplingsOnly,
            refit_rounds: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::Config("hidden_width must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(width: usize, momentum: f64) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub norm: Option<BatchNorm>,
}

impl DenseLayer {
    fn kaiming_uniform(
        rng: &mut impl Rng,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        norm: Option<BatchNorm>,
    ) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let weights = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
        Self {
            weights,
            bias: Array1::zeros(fan_out),
            activation,
            norm,
        }
    }

    fn n_params(&self) -> usize {
        self.weights.len()
            + self.bias.len()
            + self.norm.as_ref().map_or(0, |n| n.gamma.len() + n.beta.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandNet {
    pub input_shift: Array1<f64>,
    /// Whitening map applied after the shift; one row per network feature.
    pub input_transform: Array2<f64>,
    pub layers: Vec<DenseLayer>,
}

struct LayerCache {
    input: Array2<f64>,
    xhat: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
    /// Pre-activation values.
    y: Array2<f64>,
}

/// Per-feature batch statistics from a training-mode pass.
pub struct BatchStats {
    layers: Vec<Option<(Array1<f64>, Array1<f64>)>>,
    batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

impl DemandNet {
    /// Fresh network: Kaiming-uniform weights, zero biases, unit BN scale.
    pub fn new(
        config: &NetConfig,
        input_shift: Array1<f64>,
        input_transform: Array2<f64>,
        output_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let input_width = input_shift.len();
        if input_width == 0 || input_transform.dim() != (input_width, input_width) {
            return Err(Error::Contract("input normalisation has inconsistent width".into()));
        }
        if output_width == 0 {
            return Err(Error::Contract("demand network needs at least one output".into()));
        }
        let mut layers = Vec::with_capacity(config.hidden_layers + 1);
        let mut fan_in = input_width;
        for _ in 0..config.hidden_layers {
            let norm = config
                .batch_norm
                .then(|| BatchNorm::new(config.hidden_width, config.bn_momentum));
            layers.push(DenseLayer::kaiming_uniform(
                rng,
                fan_in,
                config.hidden_width,
                config.activation,
                norm,
            ));
            fan_in = config.hidden_width;
        }
        layers.push(DenseLayer::kaiming_uniform(
            rng,
            fan_in,
            output_width,
            Activation::Relu,
            None,
        ));
        Ok(Self {
            input_shift,
            input_transform,
            layers,
        })
    }

    pub fn input_width(&self) -> usize {
        self.input_shift.len()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.nrows())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::n_params).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::Contract("network has no layers".into()))?;
        if last.activation != Activation::Relu || last.norm.is_some() {
            return Err(Error::Contract("output layer must end in a plain ReLU clamp".into()));
        }
        let mut width = self.input_width();
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.ncols() != width || l.bias.len() != l.weights.nrows() {
                return Err(Error::Contract(format!("layer {k} has inconsistent shape")));
            }
            if let Some(n) = &l.norm {
                if n.running_var.iter().any(|v| !v.is_finite() || *v < 0.0)
                    || n.running_mean.iter().any(|v| !v.is_finite())
                {
                    return Err(Error::Numeric(format!("layer {k} has invalid BN statistics")));
                }
            }
            width = l.weights.nrows();
        }
        Ok(())
    }

    fn normalise_input(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.input_shift).dot(&self.input_transform.t())
    }

    fn forward_cached(&self, x: &Array2<f64>, mode: Mode) -> Result<(Array2<f64>, Vec<LayerCache>, BatchStats)> {
        if x.ncols() != self.input_width() {
            return Err(Error::Contract(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_width()
            )));
        }
        let batch = x.nrows();
        if mode == Mode::Train && batch < 2 && self.layers.iter().any(|l| l.norm.is_some()) {
            return Err(Error::Contract("training-mode batch norm needs a batch of at least 2".into()));
        }
        let mut h = self.normalise_input(x);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weights.t()) + &layer.bias;
            let (y, xhat, inv_std, stat) = match (&layer.norm, mode) {
                (None, _) => (z, None, None, None),
                (Some(bn), Mode::Train) => {
                    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                    let centred = &z - &mean;
                    let var = centred.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
                    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
                    let xhat = centred * &inv_std;
                    let y = &xhat * &bn.gamma + &bn.beta;
                    (y, Some(xhat), Some(inv_std), Some((mean, var)))
                }
                (Some(bn), Mode::Eval) => {
                    let inv_std = bn.running_var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
                    let y = (&z - &bn.running_mean) * &inv_std * &bn.gamma + &bn.beta;
                    (y, None, None, None)
                }
            };
            let out = y.mapv(|v| layer.activation.apply(v));
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation in layer {k}")));
            }
            caches.push(LayerCache {
                input: h,
                xhat,
                inv_std,
                y,
            });
            stats.push(stat);
            h = out;
        }
        Ok((h, caches, BatchStats { layers: stats, batch }))
    }

    /// Demand estimates for a `B × input_width` batch of raw inputs.
    pub fn forward(&self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        self.forward_cached(x, mode).map(|(out, _, _)| out)
    }

    /// Signs of every pre-activation, for locating activation kinks.
    pub fn activation_pattern(&self, x: &Array2<f64>, mode: Mode) -> Result<Vec<bool>> {
        let (_, caches, _) = self.forward_cached(x, mode)?;
        Ok(caches
            .iter()
            .flat_map(|c| c.y.iter().map(|v| *v > 0.0).collect::<Vec<_>>())
            .collect())
    }

    /// Fold training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let unbias = if stats.batch > 1 {
            stats.batch as f64 / (stats.batch - 1) as f64
        } else {
            1.0
        };
        for (layer, stat) in self.layers.iter_mut().zip(&stats.layers) {
            if let (Some(bn), Some((mean, var))) = (layer.norm.as_mut(), stat) {
                let m = bn.momentum;
                bn.running_mean = &bn.running_mean * (1.0 - m) + mean * m;
                bn.running_var = &bn.running_var * (1.0 - m) + &(var * (m * unbias));
            }
        }
    }

    fn backward(&self, caches: &[LayerCache], output: &Array2<f64>, d_out: Array2<f64>) -> Vec<LayerGrads> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d_act = d_out;
        let batch = output.nrows() as f64;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let act = layer.activation;
            let dy = &d_act * &cache.y.mapv(|v| act.derivative(v));
            let (dz, gamma, beta) = match (&layer.norm, &cache.xhat, &cache.inv_std) {
                (Some(bn), Some(xhat), Some(inv_std)) => {
                    let d_gamma = (&dy * xhat).sum_axis(Axis(0));
                    let d_beta = dy.sum_axis(Axis(0));
                    let dxhat = &dy * &bn.gamma;
                    let sum_dxhat = dxhat.sum_axis(Axis(0));
                    let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
                    let dz = (dxhat * batch - &sum_dxhat - xhat * &sum_dxhat_xhat) * &(inv_std / batch);
                    (dz, Some(d_gamma), Some(d_beta))
                }
                (Some(bn), _, _) => {
                    // eval-mode statistics are constants
                    let inv_std = bn.running_var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
                    let xhat = (&cache.input.dot(&layer.weights.t()) + &layer.bias - &bn.running_mean) * &inv_std;
                    let d_gamma = (&dy * &xhat).sum_axis(Axis(0));
                    let d_beta = dy.sum_axis(Axis(0));
                    (&dy * &bn.gamma * &inv_std, Some(d_gamma), Some(d_beta))
                }
                (None, _, _) => (dy, None, None),
            };
            let d_weights = dz.t().dot(&cache.input);
            let d_bias = dz.sum_axis(Axis(0));
            d_act = dz.dot(&layer.weights);
            grads.push(LayerGrads {
                weights: d_weights,
                bias: d_bias,
                gamma,
                beta,
            });
        }
        grads.reverse();
        grads
    }

    /// All trainable parameters, layer by layer: W, b, γ, β.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
            if let Some(bn) = &l.norm {
                out.extend(bn.gamma.iter());
                out.extend(bn.beta.iter());
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().expect("param count"));
            l.bias.iter_mut().for_each(|w| *w = it.next().expect("param count"));
            if let Some(bn) = &mut l.norm {
                bn.gamma.iter_mut().for_each(|w| *w = it.next().expect("param count"));
                bn.beta.iter_mut().for_each(|w| *w = it.next().expect("param count"));
            }
        }
        debug_assert!(it.next().is_none());
    }
}

fn flatten_grads(grads: &[LayerGrads]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend(g.weights.iter());
        out.extend(g.bias.iter());
        if let Some(gm) = &g.gamma {
            out.extend(gm.iter());
        }
        if let Some(bt) = &g.beta {
            out.extend(bt.iter());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Loss through the regression layer

/// Aligned samples: raw pressures `B × N` and measured flows `B × D_k`
/// ordered like the known channels of the coefficient set.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub pressures: Array2<f64>,
    pub known: Array2<f64>,
}

impl SampleBatch {
    /// Gather timesteps `indices` of `panel`; measured channels are looked up
    /// in `known` by the ids of the known channels of `coeffs`.
    pub fn gather(
        panel: &PressurePanel,
        known: &DemandSet,
        coeffs: &CoefficientSet,
        indices: &[usize],
    ) -> Result<Self> {
        let n = panel.n_sensors();
        let pressures = Array2::from_shape_fn((indices.len(), n), |(b, i)| panel.sensor(i)[indices[b]]);
        let channels: Vec<&[f64]> = coeffs
            .demand_ids
            .iter()
            .zip(&coeffs.demand_kinds)
            .filter(|(_, k)| **k == DemandKind::Known)
            .map(|(id, _)| {
                known
                    .get(id)
                    .ok_or_else(|| Error::Contract(format!("missing demand channel '{id}'")))
            })
            .collect::<Result<_>>()?;
        for c in &channels {
            if c.len() != panel.len() {
                return Err(Error::Contract("demand channel length mismatch".into()));
            }
        }
        let known = Array2::from_shape_fn((indices.len(), channels.len()), |(b, d)| channels[d][indices[b]]);
        Ok(Self { pressures, known })
    }

    pub fn len(&self) -> usize {
        self.pressures.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Self {
        Self {
            pressures: self.pressures.select(Axis(0), rows),
            known: self.known.select(Axis(0), rows),
        }
    }
}

/// Network input for a batch.
fn net_input(net: &DemandNet, batch: &SampleBatch) -> Array2<f64> {
    if net.input_width() == batch.pressures.ncols() {
        batch.pressures.clone()
    } else {
        ndarray::concatenate(Axis(1), &[batch.pressures.view(), batch.known.view()])
            .expect("matching row counts")
    }
}

/// Maps every coefficient channel to its source: a known column or a network output.
fn channel_sources(coeffs: &CoefficientSet) -> Vec<(DemandKind, usize)> {
    let (mut k, mut u) = (0, 0);
    coeffs
        .demand_kinds
        .iter()
        .map(|kind| match kind {
            DemandKind::Known => {
                k += 1;
                (DemandKind::Known, k - 1)
            }
            DemandKind::Unknown => {
                u += 1;
                (DemandKind::Unknown, u - 1)
            }
        })
        .collect()
}

/// Which regression coefficients are optimised alongside the network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionTraining {
    /// Only the couplings of the latent channels.
    #[default]
    CouplingsOnly,
    /// Every coupling row, measured and latent; k0 and k1 stay at the OLS fit.
    AllCouplings,
    /// Also k0 and k1, starting from the OLS fit; the gauge sensor's entries
    /// stay pinned.
    Joint,
}

/// Gradients of the loss with respect to every regression coefficient, laid
/// out like [`CoefficientSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionGrads {
    pub k0: Vec<f64>,
    pub k1: Vec<f64>,
    pub kd: Vec<Vec<f64>>,
}

/// Gradients of the loss with respect to all trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub layers: Vec<LayerGrads>,
    pub regression: RegressionGrads,
}

impl Gradients {
    /// Network gradients followed by the regression entries selected by `which`,
    /// in the order of [`flat_regression`].
    pub fn flat(&self, coeffs: &CoefficientSet, which: RegressionTraining) -> Vec<f64> {
        let mut out = flatten_grads(&self.layers);
        for (kind, d, i) in regression_slots(coeffs, which) {
            out.push(match kind {
                Slot::K0 => self.regression.k0[i],
                Slot::K1 => self.regression.k1[i],
                Slot::Kd => self.regression.kd[d][i],
            });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    K0,
    K1,
    Kd,
}

/// Trainable regression entries as (kind, channel, sensor).
fn regression_slots(coeffs: &CoefficientSet, which: RegressionTraining) -> Vec<(Slot, usize, usize)> {
    let n = coeffs.n_sensors();
    let g = coeffs.gauge;
    let mut out: Vec<(Slot, usize, usize)> = coeffs
        .unknown_demands()
        .into_iter()
        .flat_map(|d| (0..n).map(move |i| (Slot::Kd, d, i)))
        .collect();
    let free = (0..n).filter(|&i| i != g);
    if which == RegressionTraining::Joint {
        out.extend(free.clone().map(|i| (Slot::K0, 0, i)));
        out.extend(free.clone().map(|i| (Slot::K1, 0, i)));
    }
    if which != RegressionTraining::CouplingsOnly {
        for (d, kind) in coeffs.demand_kinds.iter().enumerate() {
            if *kind == DemandKind::Known {
                out.extend(free.clone().map(|i| (Slot::Kd, d, i)));
            }
        }
    }
    out
}

fn check_compatible(net: &DemandNet, coeffs: &CoefficientSet, batch: &SampleBatch) -> Result<()> {
    let n_unknown = coeffs.unknown_demands().len();
    if net.output_width() != n_unknown {
        return Err(Error::Contract(format!(
            "network emits {} demands, coefficients declare {n_unknown} unknown channels",
            net.output_width()
        )));
    }
    if batch.pressures.ncols() != coeffs.n_sensors() {
        return Err(Error::Contract("batch width does not match sensor count".into()));
    }
    Ok(())
}

fn loss_impl(
    net: &DemandNet,
    coeffs: &CoefficientSet,
    batch: &SampleBatch,
    mode: Mode,
    with_grads: bool,
) -> Result<(f64, Option<Gradients>, BatchStats)> {
    check_compatible(net, coeffs, batch)?;
    let x = net_input(net, batch);
    let (q_u, caches, stats) = net.forward_cached(&x, mode)?;
    let n = coeffs.n_sensors();
    let b_len = batch.len();
    let n_pairs = n * (n - 1);
    let norm = 1.0 / (b_len * n_pairs) as f64;
    let sources = channel_sources(coeffs);
    let n_ch = sources.len();

    let mut loss = 0.0;
    let mut d_q = Array2::<f64>::zeros(q_u.raw_dim());
    let mut reg = RegressionGrads {
        k0: vec![0.0; n],
        k1: vec![0.0; n],
        kd: vec![vec![0.0; n]; n_ch],
    };
    let mut q_sq = vec![0.0; n_ch];
    let mut d_qsq = vec![0.0; n_ch];
    for b in 0..b_len {
        let p = batch.pressures.row(b);
        for (d, (kind, col)) in sources.iter().enumerate() {
            let q = match kind {
                DemandKind::Known => batch.known[[b, *col]],
                DemandKind::Unknown => q_u[[b, *col]],
            };
            q_sq[d] = q * q;
        }
        d_qsq.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let est = coeffs.estimate(i, j, p[j], &q_sq);
                let mre = p[i] - est;
                loss += mre * mre;
                if !with_grads {
                    continue;
                }
                // dL/d(numerator of the estimate)
                let g = -2.0 * mre * norm / coeffs.k1[i];
                reg.k0[j] += g;
                reg.k0[i] -= g;
                reg.k1[j] += g * p[j];
                reg.k1[i] -= g * est;
                for d in 0..n_ch {
                    let row = &coeffs.kd[d];
                    d_qsq[d] += g * (row[j] - row[i]);
                    let c = g * q_sq[d];
                    reg.kd[d][j] += c;
                    reg.kd[d][i] -= c;
                }
            }
        }
        if with_grads {
            for (d, (kind, col)) in sources.iter().enumerate() {
                if *kind == DemandKind::Unknown {
                    d_q[[b, *col]] = d_qsq[d] * 2.0 * q_u[[b, *col]];
                }
            }
        }
    }
    loss *= norm;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    let grads = if with_grads {
        let layers = net.backward(&caches, &q_u, d_q);
        let g = Gradients {
            loss,
            layers,
            regression: reg,
        };
        if g.flat(coeffs, RegressionTraining::Joint).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Some(g)
    } else {
        None
    };
    Ok((loss, grads, stats))
}

/// Mean over ordered sensor pairs i ≠ j and batch samples of MRE², with the
/// unknown channels supplied by the network.
pub fn pinn_loss(net: &DemandNet, coeffs: &CoefficientSet, batch: &SampleBatch, mode: Mode) -> Result<f64> {
    loss_impl(net, coeffs, batch, mode, false).map(|(l, _, _)| l)
}

/// Exact reverse-mode gradients of [`pinn_loss`] in training mode.
pub fn gradients(net: &DemandNet, coeffs: &CoefficientSet, batch: &SampleBatch) -> Result<Gradients> {
    gradients_in(net, coeffs, batch, Mode::Train)
}

pub fn gradients_in(net: &DemandNet, coeffs: &CoefficientSet, batch: &SampleBatch, mode: Mode) -> Result<Gradients> {
    loss_impl(net, coeffs, batch, mode, true).map(|(_, g, _)| g.expect("requested"))
}

/// Trainable regression coefficients: latent couplings first, then (when
/// training jointly) k0, k1 and measured couplings of the non-gauge sensors.
pub fn flat_regression(coeffs: &CoefficientSet, which: RegressionTraining) -> Vec<f64> {
    regression_slots(coeffs, which)
        .into_iter()
        .map(|(kind, d, i)| match kind {
            Slot::K0 => coeffs.k0[i],
            Slot::K1 => coeffs.k1[i],
            Slot::Kd => coeffs.kd[d][i],
        })
        .collect()
}

pub fn set_flat_regression(coeffs: &mut CoefficientSet, which: RegressionTraining, values: &[f64]) {
    for ((kind, d, i), v) in regression_slots(coeffs, which).into_iter().zip(values) {
        match kind {
            Slot::K0 => coeffs.k0[i] = *v,
            Slot::K1 => coeffs.k1[i] = *v,
            Slot::Kd => coeffs.kd[d][i] = *v,
        }
    }
}

// ---------------------------------------------------------------------------
// Optimiser

#[derive(Debug, Clone)]
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grads[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grads[k] * grads[k];
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    /// Validation block `[start, end)` in training-window indices.
    pub validation: (usize, usize),
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    /// Loss of the fold's best model over the whole training window. Blocks
    /// differ in difficulty, so folds are ranked on this.
    pub window_loss: f64,
    /// Trained from the negated couplings of the best fold, on its block.
    #[serde(default)]
    pub mirrored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub net: DemandNet,
    /// Frozen OLS coefficients plus trained couplings of the unknown channels.
    pub coeffs: CoefficientSet,
    /// One report per fold, then the mirrored retrain.
    pub fold_reports: Vec<FoldReport>,
    /// Index into `fold_reports`.
    pub selected_fold: usize,
    pub seed: u64,
    pub config: NetConfig,
    /// Training-window loss of the network-free model.
    pub baseline_loss: f64,
    /// Training-window loss of the selected model (evaluation mode).
    pub final_loss: f64,
}

/// Contiguous validation blocks partitioning `0..len`.
pub fn fold_blocks(len: usize, folds: usize) -> Vec<(usize, usize)> {
    (0..folds)
        .map(|k| (k * len / folds, (k + 1) * len / folds))
        .collect()
}

/// Seeded RNG for one fold of one run.
fn fold_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold as u64 + 1);
    rng
}

/// Training mean and a whitening map L⁻¹ with LLᵀ the training covariance.
/// Pressures share a dominant common mode, so per-channel scaling alone
/// leaves the informative differences tiny.
fn input_normalisation(
    panel: &PressurePanel,
    known: &DemandSet,
    coeffs: &CoefficientSet,
    config: &NetConfig,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let mut channels: Vec<Vec<f64>> = panel.values().to_vec();
    if config.include_known_demands {
        for (id, kind) in coeffs.demand_ids.iter().zip(&coeffs.demand_kinds) {
            if *kind == DemandKind::Known {
                let v = known
                    .get(id)
                    .ok_or_else(|| Error::Contract(format!("missing demand channel '{id}'")))?;
                channels.push(v.to_vec());
            }
        }
    }
    let m = channels.len();
    let t = panel.len() as f64;
    let shift = Array1::from_iter(channels.iter().map(|c| c.iter().sum::<f64>() / t));
    let mut cov = Array2::<f64>::zeros((m, m));
    for a in 0..m {
        for b in 0..=a {
            let v = channels[a]
                .iter()
                .zip(&channels[b])
                .map(|(x, y)| (x - shift[a]) * (y - shift[b]))
                .sum::<f64>()
                / (t - 1.0).max(1.0);
            cov[[a, b]] = v;
            cov[[b, a]] = v;
        }
    }
    Ok((shift, crate::linalg::whitening(&cov, 1e-12)))
}

fn eval_loss(net: &DemandNet, coeffs: &CoefficientSet, batch: &SampleBatch) -> Result<f64> {
    pinn_loss(net, coeffs, batch, Mode::Eval)
}

/// Train the demand network jointly with the couplings of `unknown_ids`.
///
/// `base` carries the OLS fit over the measured channels; its k0, k1 and
/// measured couplings stay frozen. Runs k-fold cross-validation over
/// contiguous blocks and keeps the fold with the lowest validation loss.
pub fn train<S: AsRef<str>>(
    panel: &PressurePanel,
    known: &DemandSet,
    base: &CoefficientSet,
    unknown_ids: &[S],
    config: &NetConfig,
    seed: u64,
) -> Result<TrainedModel> {
    let mut model = train_once(panel, known, base, unknown_ids, config, seed)?;
    for round in 0..config.refit_rounds {
        model.refit(panel, known)?;
        if round + 1 == config.refit_rounds {
            break;
        }
        let base = model.coeffs.without_unknown_demands();
        model = train_once(panel, known, &base, unknown_ids, config, seed)?;
    }
    Ok(model)
}

fn train_once<S: AsRef<str>>(
    panel: &PressurePanel,
    known: &DemandSet,
    base: &CoefficientSet,
    unknown_ids: &[S],
    config: &NetConfig,
    seed: u64,
) -> Result<TrainedModel> {
    config.validate()?;
    base.validate()?;
    if unknown_ids.is_empty() {
        return Err(Error::Config("training needs at least one unknown demand channel".into()));
    }
    let coeffs0 = base.clone().with_unknown_demands(unknown_ids);
    let len = panel.len();
    if len < N_FOLDS * 2 {
        return Err(Error::Range(format!("{len} samples are too few for {N_FOLDS}-fold training")));
    }
    let all: Vec<usize> = (0..len).collect();
    let data = SampleBatch::gather(panel, known, &coeffs0, &all)?;
    let (shift, scale) = input_normalisation(panel, known, &coeffs0, config)?;
    let n_out = unknown_ids.len();

    let zero_net = {
        let mut rng = fold_rng(seed, 0);
        DemandNet::new(config, shift.clone(), scale.clone(), n_out, &mut rng)?
    };
    let baseline_loss = eval_loss(&zero_net, base_with_zero(&coeffs0), &data)?;

    let mut reports = Vec::with_capacity(N_FOLDS);
    let mut candidates = Vec::with_capacity(N_FOLDS);
    for (fold, block) in fold_blocks(len, N_FOLDS).into_iter().enumerate() {
        let mut rng = fold_rng(seed, fold);
        let (report, net, coeffs) = fit_fold(&data, &coeffs0, (&shift, &scale), config, fold, block, &mut rng)?;
        reports.push(report);
        candidates.push((net, coeffs));
    }
    let mut selected = reports
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.window_loss.total_cmp(&b.1.window_loss))
        .map(|(k, _)| k)
        .expect("at least one fold");
    let (mut net, mut coeffs) = candidates.swap_remove(selected);

    // The loss is unchanged when a latent channel's squared estimate is
    // reflected and its couplings negated, and a ReLU output cannot leave
    // the reflected basin once it clamps the active periods to zero. Retrain
    // the selected block from the negated couplings and keep the better one.
    let mut start = coeffs0.clone();
    for d in coeffs.unknown_demands() {
        start.kd[d] = coeffs.kd[d].iter().map(|v| -v).collect();
    }
    let mut rng = fold_rng(seed, N_FOLDS + selected);
    let (mut mirror, m_net, m_coeffs) =
        fit_fold(&data, &start, (&shift, &scale), config, selected, reports[selected].validation, &mut rng)?;
    mirror.mirrored = true;
    if mirror.window_loss < reports[selected].window_loss {
        net = m_net;
        coeffs = m_coeffs;
        reports.push(mirror);
        selected = N_FOLDS;
    } else {
        reports.push(mirror);
    }

    let final_loss = eval_loss(&net, &coeffs, &data)?;
    Ok(TrainedModel {
        format_version: MODEL_FORMAT_VERSION,
        net,
        coeffs,
        fold_reports: reports,
        selected_fold: selected,
        seed,
        config: config.clone(),
        baseline_loss,
        final_loss,
    })
}

/// Train one candidate with `block` held out, starting from `coeffs0`.
fn fit_fold(
    data: &SampleBatch,
    coeffs0: &CoefficientSet,
    norm: (&Array1<f64>, &Array2<f64>),
    config: &NetConfig,
    fold: usize,
    block: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<(FoldReport, DemandNet, CoefficientSet)> {
    let (v0, v1) = block;
    let len = data.len();
    let n_out = coeffs0.unknown_demands().len();
    let mut net = DemandNet::new(config, norm.0.clone(), norm.1.clone(), n_out, rng)?;
    let mut coeffs = coeffs0.clone();
    let val_rows: Vec<usize> = (v0..v1).collect();
    let mut train_rows: Vec<usize> = (0..v0).chain(v1..len).collect();
    let val = data.select(&val_rows);

    let n_net = net.n_params();
    let mut params = net.flat_params();
    params.extend(flat_regression(&coeffs, config.regression));
    let mut adam = Adam::new(params.len(), config.learning_rate);

    let mut best = (f64::INFINITY, 0usize, net.clone(), coeffs.clone());
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        train_rows.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in train_rows.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = data.select(chunk);
            let (loss, grads, stats) =
                loss_impl(&net, &coeffs, &batch, Mode::Train, true).map_err(|e| Error::Training {
                    fold,
                    epoch,
                    message: e.to_string(),
                })?;
            let grads = grads.expect("requested").flat(&coeffs, config.regression);
            adam.update(&mut params, &grads);
            net.set_flat_params(&params[..n_net]);
            set_flat_regression(&mut coeffs, config.regression, &params[n_net..]);
            net.update_running_stats(&stats);
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        let val_loss = eval_loss(&net, &coeffs, &val).unwrap_or(f64::NAN);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Training {
                fold,
                epoch,
                message: format!("loss became non-finite (train {train_loss}, validation {val_loss})"),
            });
        }
        train_curve.push(train_loss);
        val_curve.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, epoch, net.clone(), coeffs.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    log::debug!(
        "fold {fold}: best validation loss {:.4e} at epoch {} ({} epochs run)",
        best.0,
        best.1,
        val_curve.len()
    );
    let report = FoldReport {
        fold,
        validation: (v0, v1),
        train_loss: train_curve,
        validation_loss: val_curve,
        best_epoch: best.1,
        best_validation_loss: best.0,
        window_loss: eval_loss(&best.2, &best.3, data)?,
        mirrored: false,
    };
    Ok((report, best.2, best.3))
}

fn base_with_zero(coeffs: &CoefficientSet) -> &CoefficientSet {
    debug_assert!(coeffs
        .unknown_demands()
        .iter()
        .all(|&d| coeffs.kd[d].iter().all(|v| *v == 0.0)));
    coeffs
}

impl TrainedModel {
    pub fn unknown_ids(&self) -> Vec<String> {
        self.coeffs
            .unknown_demands()
            .into_iter()
            .map(|d| self.coeffs.demand_ids[d].clone())
            .collect()
    }

    /// Evaluation-mode demand estimates over the whole panel.
    pub fn estimate_demands(&self, panel: &PressurePanel, known: &DemandSet) -> Result<DemandSet> {
        let all: Vec<usize> = (0..panel.len()).collect();
        let batch = SampleBatch::gather(panel, known, &self.coeffs, &all)?;
        let out = self.net.forward(&net_input(&self.net, &batch), Mode::Eval)?;
        Ok(DemandSet::new(
            self.unknown_ids(),
            out.columns().into_iter().map(|c: ArrayView1<f64>| c.to_vec()).collect(),
        ))
    }

    /// Replace the linear coefficients by an OLS fit in which the network's
    /// estimates stand in for the latent channels.
    pub fn refit(&mut self, panel: &PressurePanel, known: &DemandSet) -> Result<()> {
        let est = self.estimate_demands(panel, known)?;
        let ids = est.ids.clone();
        let fit = crate::regression::fit_ols(panel, &known.clone().extend(est), self.coeffs.gauge)?;
        let mut coeffs = fit.without_demands(&ids).with_unknown_demands(&ids);
        let first = coeffs.n_demands() - ids.len();
        for (k, row) in fit.kd[first..].iter().enumerate() {
            coeffs.kd[first + k] = row.clone();
        }
        self.coeffs = coeffs;
        let all: Vec<usize> = (0..panel.len()).collect();
        let batch = SampleBatch::gather(panel, known, &self.coeffs, &all)?;
        self.final_loss = eval_loss(&self.net, &self.coeffs, &batch)?;
        Ok(())
    }

    /// MRE with measured channels from `known` and latent ones from the network.
    pub fn reconstruction_error(&self, panel: &PressurePanel, known: &DemandSet) -> Result<MreSeries> {
        let est = self.estimate_demands(panel, known)?;
        crate::regression::reconstruction_error(&self.coeffs, panel, &known.clone().extend(est))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model format version {}",
                m.format_version
            )));
        }
        m.net.validate()?;
        m.coeffs.validate()?;
        Ok(m)
    }
}

impl fmt::Display for DemandNet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.input_width())?;
        for l in &self.layers {
            write!(f, " -> {}", l.weights.nrows())?;
        }
        write!(f, " ({} parameters)", self.n_params())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_net(input: usize, hidden: usize, output: usize, bn: bool, seed: u64) -> DemandNet {
        let cfg = NetConfig {
            hidden_layers: 1,
            hidden_width: hidden,
            batch_norm: bn,
            ..NetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DemandNet::new(&cfg, Array1::zeros(input), Array2::eye(input), output, &mut rng).unwrap()
    }

    #[test]
    fn zero_parameters_emit_zero() {
        let mut net = tiny_net(3, 4, 2, true, 1);
        let zeros = vec![0.0; net.n_params()];
        net.set_flat_params(&zeros);
        let x = array![[1.0, 2.0, 3.0], [4.0, -5.0, 6.0]];
        for mode in [Mode::Train, Mode::Eval] {
            assert!(net.forward(&x, mode).unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn hand_evaluated_forward_pass() {
        let mut net = tiny_net(2, 2, 1, false, 1);
        net.layers[0].weights = array![[1.0, 0.0], [0.5, -1.0]];
        net.layers[0].bias = array![0.0, 0.25];
        net.layers[1].weights = array![[2.0, -1.0]];
        net.layers[1].bias = array![0.1];
        let slope = 0.01;
        let x = [[1.0, 2.0], [-1.0, 0.5]];
        let out = net.forward(&array![[1.0, 2.0], [-1.0, 0.5]], Mode::Eval).unwrap();
        for (b, row) in x.iter().enumerate() {
            let h0 = 1.0 * row[0];
            let h1 = 0.5 * row[0] - row[1] + 0.25;
            let a = |v: f64| if v > 0.0 { v } else { slope * v };
            let y = (2.0 * a(h0) - a(h1) + 0.1f64).max(0.0);
            assert!((out[[b, 0]] - y).abs() < 1e-15, "{} vs {y}", out[[b, 0]]);
        }
    }

    #[test]
    fn negative_output_preactivation_is_clamped() {
        let mut net = tiny_net(1, 1, 1, false, 1);
        net.layers[0].weights = array![[1.0]];
        net.layers[1].weights = array![[-1.0]];
        net.layers[1].bias = array![-0.5];
        let out = net.forward(&array![[3.0]], Mode::Eval).unwrap();
        assert_eq!(out[[0, 0]], 0.0);
    }

    #[test]
    fn width_mismatch_and_tiny_train_batch() {
        let net = tiny_net(3, 4, 1, true, 1);
        assert!(matches!(net.forward(&array![[1.0, 2.0]], Mode::Eval), Err(Error::Contract(_))));
        assert!(matches!(net.forward(&array![[1.0, 2.0, 3.0]], Mode::Train), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_norm_normalises_in_training_mode() {
        let net = tiny_net(3, 8, 1, true, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((64, 3), |_| rng.random_range(-3.0..3.0));
        let (_, caches, _) = net.forward_cached(&x, Mode::Train).unwrap();
        let xhat = caches[0].xhat.as_ref().unwrap();
        for col in xhat.columns() {
            let m = col.mean().unwrap();
            let v = col.mapv(|x| (x - m).powi(2)).mean().unwrap();
            assert!(m.abs() <= 1e-6);
            assert!((v - 1.0).abs() <= 1e-4, "variance {v}");
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let mut net = tiny_net(3, 5, 2, true, 9);
        let p: Vec<f64> = (0..net.n_params()).map(|k| k as f64 * 0.01).collect();
        net.set_flat_params(&p);
        assert_eq!(net.flat_params(), p);
    }

    #[test]
    fn folds_partition_the_window() {
        for len in [10, 4032, 4033, 12] {
            let blocks = fold_blocks(len, N_FOLDS);
            assert_eq!(blocks.len(), 5);
            assert_eq!(blocks[0].0, 0);
            assert_eq!(blocks[4].1, len);
            for w in blocks.windows(2) {
                assert_eq!(w[0].1, w[1].0);
            }
        }
    }
}
