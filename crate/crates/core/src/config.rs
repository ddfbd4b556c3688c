//! Flat key=value configuration covering architecture sizes, training
//! hyperparameters, loss weights and region label sets.
//!
//! Format: one `key = value` per line, `#` comments. CLI `--set key=value`
//! overrides win over the file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabelSets;
use crate::error::{Error, Result};

/// Network sizing; its digest is embedded in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    /// Multi-scale feature pyramid depth for stage I.
    pub levels: usize,
    /// Channel width of the finest encoder level; deeper levels add half
    /// the base width per level.
    pub base_channels: usize,
    /// Value channels of the kv encoder; key channels are a quarter of
    /// this (the 1:4 key/value split).
    pub kv_value_channels: usize,
    /// Spatial stride of the kv encoder.
    pub kv_stride: usize,
    /// Gaussian sigma (pixels) for pose heatmap rasterization.
    pub pose_sigma: f64,
    /// Scales used by the multi-scale discriminator.
    pub disc_scales: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 192,
            levels: 3,
            base_channels: 12,
            kv_value_channels: 16,
            kv_stride: 4,
            pose_sigma: 3.0,
            disc_scales: 2,
        }
    }
}

impl ArchConfig {
    pub fn kv_key_channels(&self) -> usize {
        (self.kv_value_channels / 4).max(1)
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels + self.base_channels / 2 * level
    }

    /// Content digest used to verify checkpoint/architecture compatibility.
    pub fn digest(&self) -> String {
        let canon = serde_json::to_string(self).expect("arch serializes");
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_stage1: usize,
    pub batch_stage2: usize,
    pub frames_per_sample: usize,
    pub skip_increment: usize,
    pub skip_epoch_period: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_stage1: 8,
            batch_stage2: 2,
            frames_per_sample: 5,
            skip_increment: 5,
            skip_epoch_period: 20,
            stage1_iters: 200,
            stage2_iters: 200,
            epochs: 1,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

/// Objective term weights with the reference training defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub gamma5: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 0.01,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 0.1,
            gamma4: 0.1,
            gamma5: 1.0,
            beta1: 0.1,
            beta2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.gamma1, self.gamma2,
            self.gamma3, self.gamma4, self.gamma5, self.beta1, self.beta2,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub label_sets: LabelSets,
}

fn parse_labels(v: &str) -> Result<Vec<u8>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<u8>().map_err(|_| Error::Config(format!("bad label '{s}'"))))
        .collect()
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected 'key = value'", lineno + 1)));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Set a single typed key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! num {
            () => {
                value.parse().map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))?
            };
        }
        match key {
            "arch.height" => self.arch.height = num!(),
            "arch.width" => self.arch.width = num!(),
            "arch.levels" => self.arch.levels = num!(),
            "arch.base_channels" => self.arch.base_channels = num!(),
            "arch.kv_value_channels" => self.arch.kv_value_channels = num!(),
            "arch.kv_stride" => self.arch.kv_stride = num!(),
            "arch.pose_sigma" => self.arch.pose_sigma = num!(),
            "arch.disc_scales" => self.arch.disc_scales = num!(),
            "train.learning_rate" => self.train.learning_rate = num!(),
            "train.adam_beta1" => self.train.adam_beta1 = num!(),
            "train.adam_beta2" => self.train.adam_beta2 = num!(),
            "train.batch_stage1" => self.train.batch_stage1 = num!(),
            "train.batch_stage2" => self.train.batch_stage2 = num!(),
            "train.frames_per_sample" => self.train.frames_per_sample = num!(),
            "train.skip_increment" => self.train.skip_increment = num!(),
            "train.skip_epoch_period" => self.train.skip_epoch_period = num!(),
            "train.stage1_iters" => self.train.stage1_iters = num!(),
            "train.stage2_iters" => self.train.stage2_iters = num!(),
            "train.epochs" => self.train.epochs = num!(),
            "train.seed" => self.train.seed = num!(),
            "train.checkpoint_every" => self.train.checkpoint_every = num!(),
            "loss.lambda1" => self.weights.lambda1 = num!(),
            "loss.lambda2" => self.weights.lambda2 = num!(),
            "loss.lambda3" => self.weights.lambda3 = num!(),
            "loss.lambda4" => self.weights.lambda4 = num!(),
            "loss.gamma1" => self.weights.gamma1 = num!(),
            "loss.gamma2" => self.weights.gamma2 = num!(),
            "loss.gamma3" => self.weights.gamma3 = num!(),
            "loss.gamma4" => self.weights.gamma4 = num!(),
            "loss.gamma5" => self.weights.gamma5 = num!(),
            "loss.beta1" => self.weights.beta1 = num!(),
            "loss.beta2" => self.weights.beta2 = num!(),
            "labels.clothes_arms" => self.label_sets.clothes_arms = parse_labels(value)?,
            "labels.face_neck_hair" => self.label_sets.face_neck_hair = parse_labels(value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.arch.levels < 2 {
            return Err(Error::Config("arch.levels must be >= 2".to_string()));
        }
        if !(0.0..1.0).contains(&self.train.adam_beta1)
            || !(0.0..1.0).contains(&self.train.adam_beta2)
            || !(0.0..1.0).contains(&self.train.learning_rate)
        {
            return Err(Error::Config("rates must lie in (0,1)".to_string()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_stated_hyperparameters() {
        let c = Config::default();
        assert_eq!(c.train.learning_rate, 2e-4);
        assert_eq!(c.train.adam_beta1, 0.5);
        assert_eq!(c.train.adam_beta2, 0.999);
        assert_eq!(c.train.batch_stage1, 8);
        assert_eq!(c.train.batch_stage2, 2);
        assert_eq!(c.train.frames_per_sample, 5);
        assert_eq!(c.train.skip_increment, 5);
        assert_eq!(c.train.skip_epoch_period, 20);
        assert_eq!(c.weights.lambda1, 0.01);
        assert_eq!(c.weights.lambda4, 0.01);
        assert_eq!(c.weights.gamma3, 0.1);
        assert_eq!(c.weights.beta1, 0.1);
    }

    #[test]
    fn set_and_reject_keys() {
        let mut c = Config::default();
        c.set("arch.height", "64").unwrap();
        c.set("labels.clothes_arms", "5,14,15").unwrap();
        assert_eq!(c.arch.height, 64);
        assert!(c.set("no.such.key", "1").is_err());
        assert!(c.set("arch.height", "abc").is_err());
    }

    #[test]
    fn digest_changes_with_architecture() {
        let a = ArchConfig::default();
        let mut b = a.clone();
        b.base_channels += 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), ArchConfig::default().digest());
    }
}
