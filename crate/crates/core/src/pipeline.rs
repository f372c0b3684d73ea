//! Config-file driven pipelines: data source, windows, variant and detector
//! settings in one TOML tree, resolved into [`RunData`].

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::demand_net::{NetConfig, TrainedModel};
use crate::error::{Error, Result};
use crate::eval::{grid, DetectionConfig, RunConfig, RunData, Variant};
use crate::ingest::{load_pressure_panel, slice_window, PanelSchema, PressurePanel};
use crate::regression::{CoefficientSet, DemandSet};
use crate::synth::{generate, read_truth, reference_scenario, ReferenceKind, ScenarioSpec, ScenarioTruth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Measured panel on disk.
    Csv {
        panel: PathBuf,
        schema: PanelSchema,
        /// Truth CSV in the generator's layout; enables FK and recovery scores.
        #[serde(default)]
        truth: Option<PathBuf>,
    },
    /// Scenario spec file, generated on load.
    Scenario { spec: PathBuf },
    /// One of the built-in reference scenarios.
    Reference {
        scenario: ReferenceKind,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: DateTime<Utc>,
    /// Exclusive.
    pub end: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakEvent {
    pub id: String,
    pub start: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub delta_min: f64,
    pub delta_max: f64,
    pub delta_steps: usize,
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    pub epsilon_steps: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            delta_min: 0.0,
            delta_max: 2.0,
            delta_steps: 8,
            epsilon_min: 200.0,
            epsilon_max: 400.0,
            epsilon_steps: 8,
        }
    }
}

impl SweepGrid {
    pub fn deltas(&self) -> Vec<f64> {
        grid(self.delta_min, self.delta_max, self.delta_steps)
    }

    pub fn epsilons(&self) -> Vec<f64> {
        grid(self.epsilon_min, self.epsilon_max, self.epsilon_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UqConfig {
    pub n_runs: usize,
    /// Explicit seeds; when absent, `first_seed..first_seed + n_runs`.
    pub seeds: Option<Vec<u64>>,
    pub first_seed: u64,
}

impl Default for UqConfig {
    fn default() -> Self {
        Self {
            n_runs: 100,
            seeds: None,
            first_seed: 0,
        }
    }
}

impl UqConfig {
    pub fn seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (self.first_seed..self.first_seed + self.n_runs as u64).collect(),
        }
    }
}

fn default_unknown() -> Vec<String> {
    vec!["latent".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: DataSource,
    /// Defaults to the scenario's leak-free stretch; required for CSV data.
    #[serde(default)]
    pub training: Option<Window>,
    /// Must start where training ends; defaults to the rest of the panel.
    #[serde(default)]
    pub evaluation: Option<Window>,
    /// Declared leak; scenario sources supply their own.
    #[serde(default)]
    pub leak: Option<LeakEvent>,
    /// Ids of the latent channels the network estimates (CSV data only;
    /// scenarios use their own latent ids).
    #[serde(default = "default_unknown")]
    pub unknown_demands: Vec<String>,
    #[serde(default)]
    pub gauge: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default)]
    pub sweep: SweepGrid,
    #[serde(default)]
    pub uq: UqConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_variant() -> Variant {
    Variant::Pinn
}

impl PipelineConfig {
    pub fn new(data: DataSource) -> Self {
        Self {
            data,
            training: None,
            evaluation: None,
            leak: None,
            unknown_demands: default_unknown(),
            gauge: 0,
            variant: Variant::Pinn,
            seed: 0,
            net: NetConfig::default(),
            detection: DetectionConfig::default(),
            sweep: SweepGrid::default(),
            uq: UqConfig::default(),
            output_dir: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Resolve relative data and output paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Csv { panel, truth, .. } => {
                fix(panel);
                if let Some(t) = truth {
                    fix(t);
                }
            }
            DataSource::Scenario { spec } => fix(spec),
            DataSource::Reference { .. } => {}
        }
        if let Some(o) = &mut self.output_dir {
            fix(o);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.detection.slack >= 0.0) || !(self.detection.threshold > 0.0) {
            return Err(Error::Config("detection needs slack ≥ 0 and threshold > 0".into()));
        }
        for w in [&self.training, &self.evaluation].into_iter().flatten() {
            if w.start >= w.end {
                return Err(Error::Config(format!("window [{}, {}) is empty", w.start, w.end)));
            }
        }
        if let (Some(t), Some(e)) = (&self.training, &self.evaluation) {
            if e.start != t.end {
                return Err(Error::Config("the evaluation window must start where training ends".into()));
            }
        }
        if let (Some(t), Some(l)) = (&self.training, &self.leak) {
            if l.start < t.end {
                return Err(Error::Config(format!("declared leak '{}' falls inside the training window", l.id)));
            }
        }
        if matches!(self.data, DataSource::Csv { .. }) && self.training.is_none() {
            return Err(Error::Config("CSV data needs an explicit training window".into()));
        }
        if self.variant == Variant::Pinn && self.unknown_demands.is_empty() {
            return Err(Error::Config("PINN needs at least one latent channel id".into()));
        }
        if self.uq.seeds.is_none() && self.uq.n_runs == 0 {
            return Err(Error::Config("uq.n_runs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            net: self.net.clone(),
            detection: self.detection.clone(),
        }
    }

    pub fn scenario_spec(&self) -> Result<Option<ScenarioSpec>> {
        match &self.data {
            DataSource::Csv { .. } => Ok(None),
            DataSource::Scenario { spec } => {
                let text = std::fs::read_to_string(spec)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", spec.display())))?;
                ScenarioSpec::from_toml_str(&text).map(Some)
            }
            DataSource::Reference { scenario, seed } => Ok(Some(reference_scenario(*scenario, *seed))),
        }
    }

    /// Load, window and package the data for a run.
    pub fn load_data(&self) -> Result<LoadedData> {
        self.validate()?;
        match &self.data {
            DataSource::Csv { panel, schema, truth } => {
                let full = load_pressure_panel(panel, schema)?;
                let truth = truth.as_deref().map(read_truth).transpose()?;
                let latent = truth.map(|(d, _)| d);
                let leak = self.leak.clone();
                let run = self.assemble(full, latent, self.unknown_demands.clone(), leak, None)?;
                Ok(LoadedData { run, scenario: None })
            }
            _ => {
                let spec = self.scenario_spec()?.expect("scenario source");
                let truth = generate(&spec)?;
                let default_train = Window {
                    start: truth.panel.axis().start(),
                    end: truth.panel.axis().timestamp(truth.training_samples),
                };
                let latent = truth.unknown_demands();
                let leak = match (&truth.leak_start, &spec.leak) {
                    (Some(start), Some(l)) => Some(LeakEvent {
                        id: l.id.clone(),
                        start: *start,
                    }),
                    _ => None,
                };
                let ids = latent.ids.clone();
                let run = self.assemble(truth.panel.clone(), Some(latent), ids, leak, Some(default_train))?;
                Ok(LoadedData {
                    run,
                    scenario: Some(truth),
                })
            }
        }
    }

    fn assemble(
        &self,
        full: PressurePanel,
        latent: Option<DemandSet>,
        unknown_ids: Vec<String>,
        leak: Option<LeakEvent>,
        default_train: Option<Window>,
    ) -> Result<RunData> {
        let axis = full.axis().clone();
        let training = self
            .training
            .or(default_train)
            .ok_or_else(|| Error::Config("no training window".into()))?;
        let evaluation = self.evaluation.unwrap_or(Window {
            start: training.end,
            end: axis.end(),
        });
        if evaluation.start != training.end {
            return Err(Error::Config("the evaluation window must start where training ends".into()));
        }
        if let Some(l) = &leak {
            if l.start < training.end {
                return Err(Error::Config(format!("declared leak '{}' falls inside the training window", l.id)));
            }
        }
        let panel = slice_window(&full, training.start, evaluation.end)?;
        let from = axis.index_of(training.start).expect("aligned by slice_window");
        let latent = match latent {
            Some(d) => {
                if d.values.iter().any(|v| v.len() != axis.len()) {
                    return Err(Error::Alignment("truth channels do not match the panel length".into()));
                }
                let wanted: Vec<&String> = d.ids.iter().filter(|id| unknown_ids.contains(id)).collect();
                if wanted.is_empty() {
                    None
                } else {
                    let sub = DemandSet::new(
                        wanted.iter().map(|s| s.to_string()).collect(),
                        wanted.iter().map(|id| d.get(id).expect("listed").to_vec()).collect(),
                    );
                    Some(sub.slice(from, from + panel.len()))
                }
            }
            None => None,
        };
        let train_end = panel
            .axis()
            .index_of(training.end)
            .ok_or_else(|| Error::Alignment(format!("training end {} is off-grid", training.end)))?;
        let run = RunData {
            known: DemandSet::known_from_panel(&panel),
            eval_end: panel.len(),
            panel,
            latent_truth: latent,
            unknown_ids,
            train_end,
            leak_id: leak.as_ref().map_or_else(|| "none".to_string(), |l| l.id.clone()),
            leak_start: leak.map(|l| l.start),
            gauge: self.gauge,
        };
        run.validate()?;
        Ok(run)
    }
}

/// Data ready for a run, plus the generated truth for scenario sources.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub run: RunData,
    pub scenario: Option<ScenarioTruth>,
}

/// Serialized result of `train`: network plus coefficients for PINN, plain
/// coefficients for the regression-only variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum ModelArtifact {
    #[serde(rename = "BASE")]
    Base { coefficients: CoefficientSet },
    #[serde(rename = "FK")]
    Fk { coefficients: CoefficientSet },
    #[serde(rename = "PINN")]
    Pinn { model: Box<TrainedModel> },
}

impl ModelArtifact {
    pub fn variant(&self) -> Variant {
        match self {
            ModelArtifact::Base { .. } => Variant::Base,
            ModelArtifact::Fk { .. } => Variant::Fk,
            ModelArtifact::Pinn { .. } => Variant::Pinn,
        }
    }

    pub fn coefficients(&self) -> &CoefficientSet {
        match self {
            ModelArtifact::Base { coefficients } | ModelArtifact::Fk { coefficients } => coefficients,
            ModelArtifact::Pinn { model } => &model.coeffs,
        }
    }

    /// Full-panel MRE of `data` under this model.
    pub fn reconstruction_error(&self, data: &RunData) -> Result<crate::regression::MreSeries> {
        let c = self.coefficients();
        if c.sensor_ids != data.panel.sensor_ids() {
            return Err(Error::Contract(format!(
                "model sensors {:?} do not match panel sensors {:?}",
                c.sensor_ids,
                data.panel.sensor_ids()
            )));
        }
        match self {
            ModelArtifact::Base { coefficients } => {
                crate::regression::reconstruction_error(coefficients, &data.panel, &data.known)
            }
            ModelArtifact::Fk { coefficients } => {
                let truth = data
                    .latent_truth
                    .as_ref()
                    .ok_or_else(|| Error::Contract("the FK variant needs the true latent demands".into()))?;
                let all = data.known.clone().extend(truth.clone());
                crate::regression::reconstruction_error(coefficients, &data.panel, &all)
            }
            ModelArtifact::Pinn { model } => model.reconstruction_error(&data.panel, &data.known),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
