//! Run configuration: one JSON document with a section per pipeline stage.
//! Every field is optional and defaults to the owning module's defaults;
//! unknown keys are rejected with their full key path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use tagstrain_core::baseline::SSDConfig;
use tagstrain_core::models::{LocalizerConfig, TrackerConfig, TrainOptions};
use tagstrain_core::nn::LrSchedule;
use tagstrain_core::phantom::PhantomGenConfig;
use tagstrain_core::preprocess::PreprocConfig;
use tagstrain_core::stats::EvalLabels;
use tagstrain_core::{Error, Result};

/// Training hyperparameters for one network. `base_lr` and `schedule`
/// default to the network's built-in settings when omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub base_lr: Option<f64>,
    pub schedule: Option<LrSchedule>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { batch_size: 16, base_lr: None, schedule: None }
    }
}

/// Localizer architecture plus its training hyperparameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerSection {
    pub model: LocalizerConfig,
    pub train: TrainSection,
}

/// Tracker architecture plus its training hyperparameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerSection {
    pub model: TrackerConfig,
    pub train: TrainSection,
}

/// Tracking-loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// Weight of the strain terms relative to the position term.
    pub omega: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { omega: 1.0 }
    }
}

/// Evaluation report labels for the two compared sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub label_a: String,
    pub label_b: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        let labels = EvalLabels::default();
        EvalSection { label_a: labels.a, label_b: labels.b }
    }
}

impl EvalSection {
    pub fn labels(&self) -> EvalLabels {
        EvalLabels { a: self.label_a.clone(), b: self.label_b.clone() }
    }
}

/// The full run configuration document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomGenConfig,
    pub preprocess: PreprocConfig,
    pub localizer: LocalizerSection,
    pub tracker: TrackerSection,
    pub loss: LossSection,
    pub baseline: SSDConfig,
    pub eval: EvalSection,
    /// Default seed for commands that take one; the --seed flag overrides.
    pub seed: u64,
}

impl RunConfig {
    /// 64-pixel profile: small phantoms and small networks, sized for CPU
    /// runs in minutes. Committed as `configs/toy.json`, which a test keeps
    /// in sync; the binary itself always starts from `RunConfig::default()`.
    #[cfg_attr(not(test), allow(dead_code))]
    pub fn toy() -> Self {
        RunConfig {
            phantom: PhantomGenConfig::toy(),
            preprocess: PreprocConfig::toy(),
            localizer: LocalizerSection { model: LocalizerConfig::toy(), ..Default::default() },
            tracker: TrackerSection { model: TrackerConfig::toy(), ..Default::default() },
            ..RunConfig::default()
        }
    }

    /// Loads and validates a configuration file; deserialization errors
    /// carry the offending key path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            Error::Config(format!("{}: at key path '{}': {}", path.display(), e.path(), e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.base.validate().map_err(Error::stage("config.phantom"))?;
        self.phantom.ranges.validate().map_err(Error::stage("config.phantom"))?;
        self.phantom.splits.validate().map_err(Error::stage("config.phantom"))?;
        self.preprocess.validate().map_err(Error::stage("config.preprocess"))?;
        self.localizer.model.validate().map_err(Error::stage("config.localizer"))?;
        self.tracker.model.validate().map_err(Error::stage("config.tracker"))?;
        self.baseline.validate().map_err(Error::stage("config.baseline"))?;
        if !(self.loss.omega.is_finite() && self.loss.omega >= 0.0) {
            return Err(Error::Config(format!(
                "loss.omega must be a finite nonnegative number, got {}",
                self.loss.omega
            )));
        }
        if self.localizer.train.batch_size == 0 || self.tracker.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Training options for the localizer run.
    pub fn localizer_train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.localizer.train.batch_size,
            omega: self.loss.omega,
            base_lr: self.localizer.train.base_lr,
            schedule: self.localizer.train.schedule,
        }
    }

    /// Training options for the tracker run.
    pub fn tracker_train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.tracker.train.batch_size,
            omega: self.loss.omega,
            base_lr: self.tracker.train.base_lr,
            schedule: self.tracker.train.schedule,
        }
    }
}
