//! Experiment configuration in TOML with a content fingerprint.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::ModelConfig;
use super::world::WorldConfig;
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Learning-rate factor applied to the image encoder.
    pub encoder_lr_factor: f64,
    /// Visual-prompt sets cycled through during training, one per step. With
    /// one set the decoder only ever sees the evaluation prompts.
    pub prompt_variants: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 2,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            encoder_lr_factor: 0.01,
            prompt_variants: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if self.prompt_variants == 0 {
            return Err(Error::InvalidConfig("prompt variants must be positive".into()));
        }
        if !(self.encoder_lr_factor >= 0.0 && self.encoder_lr_factor.is_finite()) {
            return Err(Error::InvalidConfig("encoder lr factor must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Optimiser settings with the encoder factor folded into the multipliers.
    pub fn optimizer(&self) -> AdamWConfig {
        let mut o = self.optimizer.clone();
        o.lr_multipliers.insert("encoder.".into(), self.encoder_lr_factor);
        o
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.decoder.templates != self.world.templates {
            return Err(Error::InvalidConfig(format!(
                "decoder expects {} templates, world provides {}",
                self.model.decoder.templates, self.world.templates
            )));
        }
        Ok(())
    }

    /// Reseed data, initialisation and batch order together.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.world.seed = seed;
        c.model = c.model.with_seed(seed);
        c.train.seed = seed;
        c
    }

    /// Change the template count on both the world and the decoder.
    pub fn with_templates(&self, m: usize) -> Self {
        let mut c = self.clone();
        c.world.templates = m;
        c.model.decoder.templates = m;
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML rendering.
    pub fn fingerprint(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        format!("{digest:x}")[..16].to_string()
    }
}
