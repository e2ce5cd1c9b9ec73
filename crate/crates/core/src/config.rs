//! Experiment configuration, read from and written to JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::losses::LossWeights;
use crate::model::{Ablation, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Ablation>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: Ablation::ALL.to_vec(),
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablate: AblationConfig,
}

impl ExperimentConfig {
    /// Reduced model and schedule that trains in minutes on one core.
    pub fn toy() -> Self {
        ExperimentConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate(self.model.encoder.required_multiple())?;
        self.data.validate()?;
        if self.ablate.variants.is_empty() || self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate needs at least one variant and one seed".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_protocol() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.train.epochs, 135);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.weight_decay, 1e-4);
        assert_eq!(c.train.decay_rate, 0.1);
        assert_eq!(c.train.decay_every, 45);
        assert_eq!(c.train.grad_clip, 0.5);
        assert_eq!(c.train.batch_size, 20);
        assert_eq!(c.train.input_size, 352);
        assert_eq!(c.loss.gamma, 0.1);
        assert_eq!(c.loss.lambda, 1.0);
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = ExperimentConfig::toy();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = ExperimentConfig::from_json(r#"{"train": {"epochs": 3, "ablation": "no_cpm"}}"#).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.ablation, Ablation::NoCpm);
        assert_eq!(partial.model, ModelConfig::default());
        assert!(ExperimentConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"ablation": "no_decoder"}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"input_size": 350}}"#).is_err());
    }
}
