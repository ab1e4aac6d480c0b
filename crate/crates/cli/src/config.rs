//! Experiment configuration: a TOML file plus command-line overrides.

use std::fmt;
use std::path::PathBuf;

use gaplab::rlhf::{Optimizer, TrainConfig};
use gaplab::samplers::MAX_GRID_STEPS;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    MarginalCheck,
    VeGap,
    VpGap,
    MixtureGap,
    W2Bound,
    DdpoTrain,
    GrpoTrain,
    GddimCheck,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::MarginalCheck,
        ExperimentKind::VeGap,
        ExperimentKind::VpGap,
        ExperimentKind::MixtureGap,
        ExperimentKind::W2Bound,
        ExperimentKind::DdpoTrain,
        ExperimentKind::GrpoTrain,
        ExperimentKind::GddimCheck,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ExperimentKind::MarginalCheck => "marginal_check",
            ExperimentKind::VeGap => "ve_gap",
            ExperimentKind::VpGap => "vp_gap",
            ExperimentKind::MixtureGap => "mixture_gap",
            ExperimentKind::W2Bound => "w2_bound",
            ExperimentKind::DdpoTrain => "ddpo_train",
            ExperimentKind::GrpoTrain => "grpo_train",
            ExperimentKind::GddimCheck => "gddim_check",
        }
    }

    pub fn is_training(self) -> bool {
        matches!(self, ExperimentKind::DdpoTrain | ExperimentKind::GrpoTrain)
    }

    pub fn is_marginal(self) -> bool {
        matches!(self, ExperimentKind::MarginalCheck | ExperimentKind::GddimCheck)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Ve,
    Vp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleChoice {
    VpQuadratic,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub group_size: usize,
    pub groups_per_iter: usize,
    pub learning_rate: f64,
    pub grpo_learning_rate: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub baseline: bool,
    pub momentum: Option<f64>,
    pub shared_group_noise: bool,
    pub theta0: f64,
    /// Policy grid size; the global `n_steps` when absent.
    pub n_steps: Option<usize>,
    pub tolerance: f64,
    pub grpo_tolerance: f64,
    pub smoothing_window: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            iterations: 40,
            batch_size: 1024,
            group_size: 16,
            groups_per_iter: 64,
            learning_rate: 0.2,
            grpo_learning_rate: 50.0,
            clip_eps: 0.2,
            epochs: 1,
            baseline: true,
            momentum: None,
            shared_group_noise: false,
            theta0: 0.0,
            n_steps: Some(100),
            tolerance: 0.05,
            grpo_tolerance: 0.1,
            smoothing_window: 5,
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self, seed: u64, beta: Option<f64>, grpo: bool) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            group_size: self.group_size,
            groups_per_iter: self.groups_per_iter,
            learning_rate: if grpo { self.grpo_learning_rate } else { self.learning_rate },
            clip_eps: self.clip_eps,
            beta,
            seed,
            optimizer: match self.momentum {
                Some(m) => Optimizer::Momentum(m),
                None => Optimizer::Sgd,
            },
            epochs: self.epochs,
            baseline: self.baseline,
            shared_group_noise: self.shared_group_noise,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSection {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub anchor: Vec<f64>,
}

impl Default for MixtureSection {
    fn default() -> Self {
        Self {
            weights: vec![0.5, 0.5],
            means: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            anchor: vec![0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct W2Section {
    pub m: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub g0: f64,
}

impl Default for W2Section {
    fn default() -> Self {
        Self { m: 2.0, l: 0.5, g0: 1.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GddimSection {
    pub schedule: ScheduleChoice,
}

fn default_beta() -> f64 {
    2.0
}

fn default_n_samples() -> usize {
    100_000
}

fn default_n_steps() -> usize {
    1000
}

fn default_out() -> PathBuf {
    PathBuf::from("gaplab-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelChoice>,
    pub eta: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: Vec<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub format: Format,
    /// Record elapsed seconds in training logs (makes them non-reproducible).
    #[serde(default)]
    pub wall_clock: bool,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub mixture: MixtureSection,
    #[serde(default)]
    pub w2: W2Section,
    #[serde(default)]
    pub gddim: GddimSection,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigError {
    pub fields: Vec<FieldError>,
}

impl ConfigError {
    pub fn single(field: &str, message: impl Into<String>) -> Self {
        Self {
            fields: vec![FieldError {
                field: field.into(),
                message: message.into(),
            }],
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for e in &self.fields {
            writeln!(f, "  {}: {}", e.field, e.message)?;
        }
        Ok(())
    }
}

/// Command-line values that replace config-file entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub experiment: Option<String>,
    pub model: Option<String>,
    pub eta: Option<Vec<f64>>,
    pub horizon: Option<Vec<f64>>,
    pub beta: Option<f64>,
    pub n_samples: Option<u64>,
    pub n_steps: Option<u64>,
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub format: Option<String>,
    pub wall_clock: bool,
}

fn toml_int(field: &str, v: u64) -> Result<toml::Value, ConfigError> {
    i64::try_from(v)
        .map(toml::Value::Integer)
        .map_err(|_| ConfigError::single(field, format!("{v} is too large")))
}

fn toml_floats(v: &[f64]) -> toml::Value {
    toml::Value::Array(v.iter().map(|x| toml::Value::Float(*x)).collect())
}

impl Overrides {
    fn apply(&self, table: &mut toml::Table) -> Result<(), ConfigError> {
        use toml::Value;
        let mut set = |k: &str, v: Value| {
            table.insert(k.into(), v);
        };
        if let Some(v) = &self.experiment {
            set("experiment", Value::String(v.clone()));
        }
        if let Some(v) = &self.model {
            set("model", Value::String(v.clone()));
        }
        if let Some(v) = &self.eta {
            set("eta", toml_floats(v));
        }
        if let Some(v) = &self.horizon {
            set("T", toml_floats(v));
        }
        if let Some(v) = self.beta {
            set("beta", Value::Float(v));
        }
        if let Some(v) = self.n_samples {
            set("n_samples", toml_int("n_samples", v)?);
        }
        if let Some(v) = self.n_steps {
            set("n_steps", toml_int("n_steps", v)?);
        }
        if let Some(v) = self.seed {
            set("seed", toml_int("seed", v)?);
        }
        if let Some(v) = &self.out {
            set("out", Value::String(v.clone()));
        }
        if let Some(v) = &self.format {
            set("format", Value::String(v.clone()));
        }
        if self.wall_clock {
            set("wall_clock", Value::Boolean(true));
        }
        Ok(())
    }
}

/// Accepts bare integers where floats are expected (`eta = [1]`).
fn widen_integers(table: &mut toml::Table) {
    const FLOAT_KEYS: [&str; 3] = ["eta", "T", "beta"];
    for key in FLOAT_KEYS {
        match table.get_mut(key) {
            Some(toml::Value::Integer(i)) => {
                let f = *i as f64;
                table.insert(key.into(), toml::Value::Float(f));
            }
            Some(toml::Value::Array(items)) => {
                for item in items.iter_mut() {
                    if let toml::Value::Integer(i) = item {
                        *item = toml::Value::Float(*i as f64);
                    }
                }
            }
            _ => {}
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a configuration file without overrides.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Self::load(Some(text), &Overrides::default())
    }

    pub fn load(text: Option<&str>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut table: toml::Table = match text {
            Some(t) => t.parse().map_err(|e: toml::de::Error| ConfigError::single("config", e.message()))?,
            None => toml::Table::new(),
        };
        overrides.apply(&mut table)?;
        widen_integers(&mut table);
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::single("config", e.message()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.into(),
                message,
            })
        };
        if self.eta.is_empty() {
            bad("eta", "list must not be empty".into());
        }
        for e in &self.eta {
            if !(e.is_finite() && *e >= 0.0) {
                bad("eta", format!("{e} is not a nonnegative number"));
            } else if self.experiment.is_training() && *e == 0.0 {
                bad("eta", "training needs a stochastic policy (eta > 0)".into());
            }
        }
        if self.horizon.is_empty() {
            bad("T", "list must not be empty".into());
        }
        for t in &self.horizon {
            if !(t.is_finite() && *t > 0.0) {
                bad("T", format!("{t} is not a positive number"));
            }
        }
        if self.experiment.is_marginal() && self.horizon.len() > 1 {
            bad("T", format!("{} takes a single horizon", self.experiment));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            bad("beta", format!("{} is not a nonnegative number", self.beta));
        }
        if self.n_samples < 100 {
            bad("n_samples", format!("{} is below the minimum of 100", self.n_samples));
        }
        if self.n_steps == 0 || self.n_steps > MAX_GRID_STEPS {
            bad("n_steps", format!("{} is outside 1..={MAX_GRID_STEPS}", self.n_steps));
        }
        match (self.experiment, self.model) {
            (ExperimentKind::VeGap, Some(ModelChoice::Vp)) | (ExperimentKind::VpGap, Some(ModelChoice::Ve)) => {
                bad("model", format!("conflicts with experiment {}", self.experiment));
            }
            _ => {}
        }
        if self.experiment.is_training() {
            let t = &self.training;
            if let Some(n) = t.n_steps {
                if n == 0 || n > MAX_GRID_STEPS {
                    bad("training.n_steps", format!("{n} is outside 1..={MAX_GRID_STEPS}"));
                }
            }
            for grpo in [false, true] {
                if let Err(e) = t.train_config(self.seed, None, grpo).validate() {
                    bad("training", e.to_string());
                }
            }
            if t.smoothing_window == 0 {
                bad("training.smoothing_window", "must be positive".into());
            }
            if !(t.theta0.is_finite()) {
                bad("training.theta0", "must be finite".into());
            }
        }
        if self.experiment == ExperimentKind::MixtureGap {
            let m = &self.mixture;
            if m.weights.len() != m.means.len() || m.weights.is_empty() {
                bad("mixture", "weights and means must be non-empty and of equal length".into());
            }
            if m.means.iter().any(|mu| mu.len() != m.anchor.len()) || m.anchor.is_empty() {
                bad("mixture", "means and anchor must share one positive dimension".into());
            }
            if m.weights.iter().chain(m.anchor.iter()).chain(m.means.iter().flatten()).any(|v| !v.is_finite()) {
                bad("mixture", "entries must be finite".into());
            }
        }
        if self.experiment == ExperimentKind::W2Bound {
            let w = &self.w2;
            if ![w.m, w.l, w.g0].iter().all(|v| v.is_finite()) || w.g0 < 0.0 {
                bad("w2", "m, L must be finite and g0 nonnegative".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { fields: errs })
        }
    }

    pub fn model_or(&self, default: ModelChoice) -> ModelChoice {
        match self.experiment {
            ExperimentKind::VeGap => ModelChoice::Ve,
            ExperimentKind::VpGap => ModelChoice::Vp,
            _ => self.model.unwrap_or(default),
        }
    }

    /// Canonical JSON of everything that determines the data files.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out");
        }
        v.to_string()
    }
}
