//! Run configuration. The file format is flat TOML whose keys are the field
//! names below; per-stage loss weights use dotted keys (`stage2.gamma = 0.5`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Activation, LrSchedule};
use crate::losses::{LossWeights, Reduction};
use crate::model::Architecture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Temporal neighbors per segment.
    pub m: usize,
    /// Feature-space neighbors per segment.
    pub n: usize,
    pub validation_fraction: f64,
    pub stage1: LossWeights,
    pub stage2: LossWeights,
    /// Reduction of reconstruction and consistency errors over feature dims.
    pub reduction: Reduction,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
    pub lr: LrSchedule,
    pub pairs_per_epoch: usize,
    pub positive_ratio: f64,
    pub kmeans_restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            m: 2,
            n: 5,
            validation_fraction: 0.1,
            stage1: LossWeights::stage1_default(),
            stage2: LossWeights::stage2_default(),
            reduction: Reduction::Mean,
            hidden: vec![128, 64],
            embedding_dim: 32,
            activation: Activation::default(),
            lr: LrSchedule::default(),
            pairs_per_epoch: 1000,
            positive_ratio: 0.5,
            kmeans_restarts: 10,
        }
    }
}

impl TrainConfig {
    /// Parses a config file; keys not present keep their default values,
    /// including individual keys inside the stage and `lr` tables.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overrides: toml::Table =
            text.parse().map_err(|e| Error::Parameter(format!("config: {e}")))?;
        Self::default().with_overrides(overrides)
    }

    /// Applies key/value overrides (same shape as the file) on top of `self`.
    pub fn with_overrides(&self, overrides: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(self)
            .map_err(|e| Error::Parameter(format!("config: {e}")))?;
        merge(&mut base, overrides);
        let cfg: TrainConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e| Error::Parameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Parameter(m));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.patience == 0 {
            return fail("patience must be >= 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.m == 0 || self.n == 0 {
            return fail("neighbor counts m and n must be >= 1".into());
        }
        if !(self.lr.initial > 0.0) || !(self.lr.decay_rate > 0.0) || self.lr.decay_steps == 0 {
            return fail(format!("invalid learning-rate schedule {:?}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.positive_ratio) {
            return fail(format!("positive_ratio must be in [0, 1], got {}", self.positive_ratio));
        }
        self.stage1.validate_stage1()?;
        self.stage2.validate_stage2()?;
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            embedding_dim: self.embedding_dim,
            activation: self.activation,
        }
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
