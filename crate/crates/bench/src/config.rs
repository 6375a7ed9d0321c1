//! JSON experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use laau_core::baselines::BaselineConfig;
use laau_core::train::{OnlineConfig, OptimizerKind, TrainConfig};
use laau_core::unroll::{BudgetRecurrence, UnrollConfig};
use laau_core::{FairnessFamily, ModelKind};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Laau,
    Opt,
    Equal,
    AvgLt,
    Dgd,
    Mw,
    Direct,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Laau,
        Algorithm::Opt,
        Algorithm::Equal,
        Algorithm::AvgLt,
        Algorithm::Dgd,
        Algorithm::Mw,
        Algorithm::Direct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Laau => "laau",
            Algorithm::Opt => "opt",
            Algorithm::Equal => "equal",
            Algorithm::AvgLt => "avg_lt",
            Algorithm::Dgd => "dgd",
            Algorithm::Mw => "mw",
            Algorithm::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyConfig {
    pub x_min: f64,
    pub x_max: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self { x_min: 1.0, x_max: 40.0 }
    }
}

impl FamilyConfig {
    pub fn build(&self) -> Result<FairnessFamily> {
        if !(self.x_min > 0.0 && self.x_max > self.x_min && self.x_max.is_finite()) {
            return Err(BenchError::Config("family box must satisfy 0 < x_min < x_max".into()));
        }
        Ok(FairnessFamily::new(self.x_min, self.x_max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelChoice,
    pub hidden: [usize; 2],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelChoice::Mlp,
            hidden: [10, 10],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self.kind {
            ModelChoice::Linear => ModelKind::Linear,
            ModelChoice::Mlp => ModelKind::Mlp { hidden: self.hidden },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub optimizer: OptimizerChoice,
    /// `[epochs, rate]` phases.
    pub schedule: Vec<(usize, f64)>,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    /// Keep the best-validation checkpoint instead of the last one.
    pub select_best: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let p = TrainConfig::paper();
        Self {
            optimizer: OptimizerChoice::Adam,
            schedule: p.schedule,
            batch_size: p.batch_size,
            clip_norm: p.clip_norm,
            select_best: p.select_best,
            seed: p.seed,
        }
    }
}

impl TrainingConfig {
    pub fn build(&self) -> TrainConfig {
        TrainConfig {
            optimizer: match self.optimizer {
                OptimizerChoice::Sgd => OptimizerKind::Sgd,
                OptimizerChoice::Adam => OptimizerKind::Adam,
            },
            schedule: self.schedule.clone(),
            batch_size: self.batch_size,
            seed: self.seed,
            clip_norm: self.clip_norm,
            select_best: self.select_best,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineSettings {
    pub rounds: usize,
    pub step_size: f64,
    pub clip_norm: Option<f64>,
}

impl Default for OnlineSettings {
    fn default() -> Self {
        Self {
            rounds: 2000,
            step_size: 1e-3,
            clip_norm: Some(10.0),
        }
    }
}

impl OnlineSettings {
    pub fn build(&self) -> OnlineConfig {
        OnlineConfig {
            step_size: self.step_size,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselinesConfig {
    pub dgd_eta: Option<f64>,
    pub mw_eta: Option<f64>,
    pub mw_init: f64,
    pub last_step_fix: bool,
    pub direct_seed: u64,
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        let d = BaselineConfig::default();
        Self {
            dgd_eta: d.dgd_eta,
            mw_eta: d.mw_eta,
            mw_init: d.mw_init,
            last_step_fix: d.last_step_fix,
            direct_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnrollSettings {
    pub reserve: bool,
    /// Drop the `∂x/∂b` path from the budget-gradient recurrence.
    pub lambda_path_only: bool,
}

impl Default for UnrollSettings {
    fn default() -> Self {
        Self {
            reserve: true,
            lambda_path_only: false,
        }
    }
}

impl UnrollSettings {
    pub fn build(&self) -> UnrollConfig {
        UnrollConfig {
            reserve: self.reserve,
            recurrence: if self.lambda_path_only {
                BudgetRecurrence::LambdaPathOnly
            } else {
                BudgetRecurrence::Full
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSettings {
    /// Injected `W₁` levels.
    pub targets: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for OodSettings {
    fn default() -> Self {
        Self {
            targets: vec![0.05, 0.1, 0.2],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: FamilyConfig,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub online: OnlineSettings,
    pub baselines: BaselinesConfig,
    pub unroll: UnrollSettings,
    pub algorithms: Vec<Algorithm>,
    /// Horizons swept by `compare`.
    pub horizons: Vec<usize>,
    pub ood: OodSettings,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            family: FamilyConfig::default(),
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            online: OnlineSettings::default(),
            baselines: BaselinesConfig::default(),
            unroll: UnrollSettings::default(),
            algorithms: Algorithm::ALL.to_vec(),
            horizons: vec![10, 20, 40],
            ood: OodSettings::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            BenchError::Config(msg) => BenchError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Overrides every seed with one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.model.seed = seed;
        self.training.seed = seed;
        self.baselines.direct_seed = seed.wrapping_add(1);
        self
    }

    pub fn paper_scale(mut self) -> Self {
        self.dataset = self.dataset.paper_scale();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.family.build()?;
        self.dataset.validate()?;
        self.training.build().validate()?;
        if self.algorithms.is_empty() {
            return Err(BenchError::Config("no algorithms selected".into()));
        }
        if self.horizons.iter().any(|&n| n < 2) {
            return Err(BenchError::Config("horizons must be at least 2".into()));
        }
        for eta in [self.baselines.dgd_eta, self.baselines.mw_eta].into_iter().flatten() {
            if !(eta > 0.0) {
                return Err(BenchError::Config("step sizes must be positive".into()));
            }
        }
        if !(self.online.step_size >= 0.0) {
            return Err(BenchError::Config("online step size must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            dgd_eta: self.baselines.dgd_eta,
            mw_eta: self.baselines.mw_eta,
            mw_init: self.baselines.mw_init,
            last_step_fix: self.baselines.last_step_fix,
            reserve: self.unroll.reserve,
        }
    }
}
