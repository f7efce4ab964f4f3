//! The run configuration file: one TOML document with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::SceneConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::head::HeadConfig;
use crate::numerics::layers::NormConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Model initialization, shuffling and dropout seed.
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    /// Worker threads for data generation and evaluation.
    pub threads: usize,
    /// Minimum score of a prediction counted by the recall probes.
    pub recall_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            seed: 0,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            train_sequences: 500,
            eval_sequences: 100,
            threads: 1,
            recall_threshold: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("lr and adam_eps must be positive, weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must be in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        Ok(())
    }
}

/// Every tunable of a generate, train and evaluate run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: SceneConfig,
    pub norm: NormConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.fusion.validate(self.scene.channels)?;
        self.head.validate(self.scene.channels)?;
        self.train.validate()?;
        if self.head.num_classes != self.scene.num_classes() {
            return Err(Error::Config(format!(
                "head.num_classes {} != {} scene classes",
                self.head.num_classes,
                self.scene.num_classes()
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::numerics::container::write_file(path, self.to_toml().as_bytes())
    }

    /// Class names in label order.
    pub fn class_names(&self) -> Vec<String> {
        self.scene.classes.iter().map(|c| c.name.clone()).collect()
    }
}
