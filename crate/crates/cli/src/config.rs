//! JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use transfuser_core::control::{ControlError, ControllerConfig};
use transfuser_core::eval::{EvalConfig, EvalError};
use transfuser_core::fusion::RowSpec;
use transfuser_core::fusion::{FusionConfig, FusionError};
use transfuser_core::model::{Method, ModelError, ModelSpec, Profile};
use transfuser_core::sim::dataset::{DatasetConfig, DatasetError};
use transfuser_core::sim::{ExpertConfig, ScenarioKind};
use transfuser_core::tensor::fnv1a;
use transfuser_core::train::{TrainConfig, TrainError};

/// Offset separating evaluation seeds from data-generation seeds.
const EVAL_SEED_OFFSET: u64 = 10_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{field} = {value} is out of range ({bound})")]
    Range { field: String, value: String, bound: String },
    #[error("{field}: unknown scenario `{value}`")]
    Scenario { field: String, value: String },
}

fn range(field: impl Into<String>, value: impl ToString, bound: impl Into<String>) -> ConfigError {
    ConfigError::Range {
        field: field.into(),
        value: value.to_string(),
        bound: bound.into(),
    }
}

/// Optional overrides of the profile's fusion defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionOverrides {
    pub scales: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub shared: Option<bool>,
    pub pos_embed: Option<bool>,
}

impl FusionOverrides {
    pub fn apply(&self, base: FusionConfig) -> FusionConfig {
        FusionConfig {
            scales: self.scales.unwrap_or(base.scales),
            layers: self.layers.unwrap_or(base.layers),
            heads: self.heads.unwrap_or(base.heads),
            shared_transformer: self.shared.unwrap_or(base.shared_transformer),
            positional_embedding: self.pos_embed.unwrap_or(base.positional_embedding),
            ..base
        }
    }
}

/// Expert data collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenarios: Vec<String>,
    pub routes: usize,
    /// Recorded time per route (s).
    pub duration: f64,
    pub frame_rate: f64,
    pub physics_dt: f64,
    pub goal_lead: f64,
    pub expert: ExpertConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = DatasetConfig::desk(0);
        Self {
            scenarios: d.scenarios.iter().map(|k| k.name().to_string()).collect(),
            routes: d.routes,
            duration: d.duration,
            frame_rate: d.frame_rate,
            physics_dt: d.physics_dt,
            goal_lead: d.goal_lead,
            expert: d.expert,
        }
    }
}

/// Seed layout: data is generated from `base`, training run `k` uses
/// `base + k` and evaluation run `j` uses `base + 10000 + j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub base: u64,
    pub train_runs: usize,
    pub eval_runs: usize,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            base: 0,
            train_runs: 3,
            eval_runs: 3,
        }
    }
}

impl SeedConfig {
    pub fn data(&self) -> u64 {
        self.base
    }

    pub fn train(&self, run: usize) -> u64 {
        self.base.wrapping_add(run as u64)
    }

    pub fn eval(&self, run: usize) -> u64 {
        self.base.wrapping_add(EVAL_SEED_OFFSET + run as u64)
    }
}

/// How the learned policy is queried in closed loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Time between network decisions (s).
    pub period: f64,
    /// Minimum distance ahead of the ego of the goal location (m).
    pub goal_lead: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            period: 0.5,
            goal_lead: 5.0,
        }
    }
}

/// Routes driven per evaluation run; route `r` uses scenario
/// `scenarios[r % len]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteSetConfig {
    pub scenarios: Vec<String>,
    pub routes: usize,
}

impl Default for RouteSetConfig {
    fn default() -> Self {
        Self {
            scenarios: ScenarioKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            routes: ScenarioKind::ALL.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Training steps per configuration row.
    pub steps: u64,
    /// Wall-clock budget for the whole grid (s).
    pub budget_secs: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            budget_secs: 3600.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub frames: usize,
    pub rows: RowSpec,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            frames: 100,
            rows: RowSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub method: Method,
    pub fusion: FusionOverrides,
    /// Profile defaults when absent.
    pub train: Option<TrainConfig>,
    pub data: DataConfig,
    pub seeds: SeedConfig,
    pub controller: ControllerConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
    pub eval_routes: RouteSetConfig,
    pub ablation: AblationConfig,
    pub attention: AttentionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Desk,
            method: Method::Transfuser,
            fusion: FusionOverrides::default(),
            train: None,
            data: DataConfig::default(),
            seeds: SeedConfig::default(),
            controller: ControllerConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalConfig::default(),
            eval_routes: RouteSetConfig::default(),
            ablation: AblationConfig::default(),
            attention: AttentionConfig::default(),
        }
    }
}

fn parse_scenarios(field: &str, names: &[String]) -> Result<Vec<ScenarioKind>, ConfigError> {
    if names.is_empty() {
        return Err(range(field, "[]", "non-empty"));
    }
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            n.parse().map_err(|_| ConfigError::Scenario {
                field: format!("{field}[{i}]"),
                value: n.clone(),
            })
        })
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn fusion_config(&self) -> FusionConfig {
        self.fusion.apply(self.profile.fusion())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::new(self.method, self.profile, self.fusion_config())
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.unwrap_or(match self.profile {
            Profile::Paper => TrainConfig::paper(),
            Profile::Desk => TrainConfig::desk(),
        })
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig, ConfigError> {
        Ok(DatasetConfig {
            rig: self.profile.rig(),
            scenarios: parse_scenarios("data.scenarios", &self.data.scenarios)?,
            routes: self.data.routes,
            duration: self.data.duration,
            frame_rate: self.data.frame_rate,
            physics_dt: self.data.physics_dt,
            goal_lead: self.data.goal_lead,
            expert: self.data.expert,
            seed: self.seeds.data(),
        })
    }

    /// Scenario and scenario seed of evaluation route `r` in run `run`.
    pub fn eval_route(&self, run: usize, r: usize) -> Result<(ScenarioKind, u64), ConfigError> {
        let kinds = parse_scenarios("eval_routes.scenarios", &self.eval_routes.scenarios)?;
        let key = [self.seeds.eval(run).to_le_bytes(), (r as u64).to_le_bytes()].concat();
        Ok((kinds[r % kinds.len()], fnv1a(&key)))
    }

    /// Checks every field; the error names the field and its bound.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model_spec().validate().map_err(|e| match e {
            ModelError::Fusion(FusionError::Range { field, value, bound }) => range(format!("fusion.{field}"), value, bound),
            other => range("fusion", "invalid", other.to_string()),
        })?;
        self.train_config().validate().map_err(|e| match e {
            TrainError::Range { field, value, bound } => range(field, value, bound),
            other => range("train", "invalid", other.to_string()),
        })?;
        let d = self.dataset_config()?;
        d.validate().map_err(|e| match e {
            DatasetError::Range { field, value, bound } => range(field.replacen("dataset.", "data.", 1), value, bound),
            other => range("data", "invalid", other.to_string()),
        })?;
        self.controller.validate().map_err(|ControlError::Range { field, value, bound }| {
            range(format!("controller.{field}"), value, bound)
        })?;
        self.eval.validate().map_err(|e| match e {
            EvalError::Range { field, value, bound } if field.starts_with("eval.") => range(field, value, bound),
            EvalError::Range { field, value, bound } => range(format!("eval.{field}"), value, bound),
            other => range("eval", "invalid", other.to_string()),
        })?;
        let s = &self.seeds;
        if s.train_runs == 0 {
            return Err(range("seeds.train_runs", s.train_runs, ">= 1"));
        }
        if s.eval_runs == 0 {
            return Err(range("seeds.eval_runs", s.eval_runs, ">= 1"));
        }
        let p = &self.policy;
        if !(p.period >= self.eval.physics_dt && p.period.is_finite()) {
            return Err(range("policy.period", p.period, ">= eval.physics_dt"));
        }
        if !(p.goal_lead >= 0.0 && p.goal_lead.is_finite()) {
            return Err(range("policy.goal_lead", p.goal_lead, ">= 0"));
        }
        parse_scenarios("eval_routes.scenarios", &self.eval_routes.scenarios)?;
        if self.eval_routes.routes == 0 {
            return Err(range("eval_routes.routes", self.eval_routes.routes, ">= 1"));
        }
        if self.ablation.steps == 0 {
            return Err(range("ablation.steps", self.ablation.steps, ">= 1"));
        }
        if !(self.ablation.budget_secs > 0.0) {
            return Err(range("ablation.budget_secs", self.ablation.budget_secs, "> 0"));
        }
        let a = &self.attention;
        if a.frames == 0 {
            return Err(range("attention.frames", a.frames, ">= 1"));
        }
        let grid = self.fusion_config().token_grid;
        if a.rows.grid != grid {
            return Err(range("attention.rows.grid", a.rows.grid, format!("== fusion token grid {grid}")));
        }
        for (field, [lo, hi]) in [("attention.rows.image_rows", a.rows.image_rows), ("attention.rows.lidar_rows", a.rows.lidar_rows)] {
            if lo == 0 || lo > hi || hi > grid {
                return Err(range(field, format!("[{lo}, {hi}]"), format!("1 <= lo <= hi <= {grid}")));
            }
        }
        Ok(())
    }
}
