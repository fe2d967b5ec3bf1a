//! Global JSON configuration: one file with a section per subsystem.
//! Unknown keys are rejected everywhere so typos fail loudly.

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::MetricsConfig;
use crate::model::ModelConfig;
use crate::postprocess::PostprocessConfig;
use crate::preprocess::PreprocessConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "MDNET_CONFIG";

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub postprocess: PostprocessConfig,
    pub metrics: MetricsConfig,
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.postprocess.validate()?;
        self.metrics.validate()?;
        let div = self.model.divisor();
        for (i, &s) in self.preprocess.target_shape.iter().enumerate() {
            if s % div != 0 {
                let _ = i;
                return Err(Error::IndivisibleShape(s, div));
            }
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    /// Loads the explicit path if given, else the `MDNET_CONFIG` file,
    /// else the built-in defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        if let Some(p) = path {
            return Self::load(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) => Self::load(Path::new(&p)),
            None => Ok(Self::default()),
        }
    }

    /// Reduces every subsystem to desk scale: small grid, small model,
    /// few epochs. Used by smoke tests and the synthetic workflows.
    pub fn toy(seed: u64) -> Self {
        let mut c = Self::default();
        c.preprocess.target_shape = [32, 32, 32];
        c.model.input_shape = [32, 32, 32];
        c.model.in_channels = 12;
        c.model.base_filters = 12;
        c.augment = AugmentConfig::disabled(seed);
        c.train.seed = seed;
        c.train.n_epochs = 8;
        c.train.n_folds = 2;
        c.train.n_ensemble = 2;
        c
    }
}
