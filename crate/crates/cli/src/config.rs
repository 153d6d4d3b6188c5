//! Experiment configuration: one TOML document covering data generation,
//! model, training, selection, sampling and evaluation. Unknown keys are
//! rejected at every level.

use std::path::{Path, PathBuf};

use ccfg_core::diffusion::{SamplerConfig, ScheduleConfig};
use ccfg_core::denoiser::{Architecture, TrainConfig};
use ccfg_core::grid::{SyntheticConfig, VariableSetup, TARGET_CHANNELS};
use ccfg_core::guidance::Scheme;
use ccfg_core::selection::SelectionConfig;
use ccfg_core::{seed, Error, Result};
use serde::{Deserialize, Serialize};

// Stream indices under the global seed.
const DATA_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;
const SELECT_STREAM: u64 = 4;
const SAMPLE_STREAM: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub domain: SyntheticConfig,
    pub setup: VariableSetup,
    pub train_count: usize,
    pub eval_count: usize,
    /// Derived from the global seed.
    pub domain_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domain: SyntheticConfig::default(),
            setup: VariableSetup::Basic,
            train_count: 2000,
            eval_count: 500,
            domain_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
    /// Derived from the global seed.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::new(TARGET_CHANNELS, 0);
        Self {
            width: a.width,
            time_dim: a.time_dim,
            time_hidden: a.time_hidden,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, cond_channels: usize) -> Architecture {
        Architecture {
            target_channels: TARGET_CHANNELS,
            cond_channels,
            width: self.width,
            time_dim: self.time_dim,
            time_hidden: self.time_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub scheme: Scheme,
    /// Guidance scale of plain CFG.
    pub cfg_weight: f64,
    /// Training timestamps used by weight selection.
    pub selection_items: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Ccfg,
            cfg_weight: 1.5,
            selection_items: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub schemes: Vec<Scheme>,
    /// Ensemble sizes reported; members are shared, so smaller sizes are
    /// prefixes of the largest.
    pub ensemble_sizes: Vec<usize>,
    /// Use only the first `n` evaluation timestamps.
    pub max_timestamps: Option<usize>,
    /// Centered crop applied to evaluation pairs.
    pub crop: Option<usize>,
    pub baseline: bool,
    pub model_name: String,
    pub domain_name: String,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            schemes: vec![Scheme::Direct, Scheme::Cfg, Scheme::Ccfg],
            ensemble_sizes: vec![1],
            max_timestamps: None,
            crop: None,
            baseline: true,
            model_name: "toy".into(),
            domain_name: "synthetic".into(),
        }
    }
}

/// Artifact locations; unset entries default to fixed names under the
/// output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub selection: SelectionConfig,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub evaluate: EvaluateConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            selection: SelectionConfig::default(),
            sampler: SamplerConfig::default(),
            guidance: GuidanceConfig::default(),
            evaluate: EvaluateConfig::default(),
            paths: PathsConfig::default(),
        }
        .resolved()
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scheme: Option<Scheme>,
    pub ensemble: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let c = c.resolved();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies overrides and re-derives every component seed from the
    /// global one.
    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.scheme {
            self.guidance.scheme = s;
            self.evaluate.schemes = vec![s];
        }
        if let Some(n) = o.ensemble {
            self.sampler.ensemble_count = n;
            self.evaluate.ensemble_sizes = vec![n];
        }
        let c = self.resolved();
        c.validate()?;
        Ok(c)
    }

    fn resolved(mut self) -> Self {
        // TOML integers are signed, so derived seeds keep 63 bits.
        let sub = |stream| seed::derive(self.seed, stream) >> 1;
        self.data.domain_seed = sub(DATA_STREAM);
        self.model.init_seed = sub(INIT_STREAM);
        self.train.seed = sub(TRAIN_STREAM);
        self.selection.seed = sub(SELECT_STREAM);
        self.sampler.seed = sub(SAMPLE_STREAM);
        if let Some(&max) = self.evaluate.ensemble_sizes.iter().max() {
            self.sampler.ensemble_count = self.sampler.ensemble_count.max(max);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must be at most {}", i64::MAX)));
        }
        self.data.domain.validate()?;
        if self.data.train_count == 0 || self.data.eval_count == 0 {
            return Err(Error::Config("train_count and eval_count must be positive".into()));
        }
        let sched = self.schedule.build()?;
        self.train.validate()?;
        self.sampler.validate(&sched)?;
        self.model.architecture(1).validate()?;
        if !(self.guidance.cfg_weight.is_finite() && self.guidance.cfg_weight >= 0.0) {
            return Err(Error::Config("cfg_weight must be finite and non-negative".into()));
        }
        if self.guidance.selection_items == 0 {
            return Err(Error::Config("selection_items must be positive".into()));
        }
        if self.evaluate.schemes.is_empty() || self.evaluate.ensemble_sizes.is_empty() {
            return Err(Error::Config("evaluate needs at least one scheme and one ensemble size".into()));
        }
        if self.evaluate.ensemble_sizes.contains(&0) {
            return Err(Error::Config("ensemble sizes must be positive".into()));
        }
        if self.evaluate.max_timestamps == Some(0) {
            return Err(Error::Config("max_timestamps must be positive".into()));
        }
        Ok(())
    }
}
