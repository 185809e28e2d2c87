//! Training configuration: flat `key=value` text file with `#` comments.

use crate::error::{Error, IoContext, Result};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tile_size: usize,
    /// Forces fully sequential execution; thread hints are ignored.
    pub deterministic: bool,
    /// Optional horizontal/vertical flip augmentation (off by default).
    pub augment_flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 8,
            seed: 42,
            tile_size: 256,
            deterministic: true,
            augment_flips: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.tile_size == 0 || self.tile_size % 32 != 0 {
            return Err(Error::config(format!(
                "tile_size must be a positive multiple of 32, got {}",
                self.tile_size
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0,1), got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }

    /// Parse a flat `key=value` document; unknown keys are rejected so typos
    /// do not silently fall back to defaults.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got '{raw}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| {
                Error::config(format!("line {}: invalid value for {key}: {e}", lineno + 1))
            };
            match key {
                "lr" => cfg.lr = value.parse().map_err(|e| bad(&e))?,
                "beta1" => cfg.beta1 = value.parse().map_err(|e| bad(&e))?,
                "beta2" => cfg.beta2 = value.parse().map_err(|e| bad(&e))?,
                "adam_eps" => cfg.adam_eps = value.parse().map_err(|e| bad(&e))?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|e| bad(&e))?,
                "epochs" => cfg.epochs = value.parse().map_err(|e| bad(&e))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                "tile_size" => cfg.tile_size = value.parse().map_err(|e| bad(&e))?,
                "deterministic" => cfg.deterministic = value.parse().map_err(|e| bad(&e))?,
                "augment_flips" => cfg.augment_flips = value.parse().map_err(|e| bad(&e))?,
                other => {
                    return Err(Error::config(format!(
                        "line {}: unknown configuration key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.beta1, 0.9);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.tile_size, 256);
    }

    #[test]
    fn parses_overrides_and_comments() {
        let c = TrainConfig::parse(
            "# comment\nlr = 0.001\nepochs=3\ntile_size=64 # inline\n\nseed=7\n",
        )
        .unwrap();
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.tile_size, 64);
        assert_eq!(c.seed, 7);
        assert_eq!(c.batch_size, 8, "untouched keys keep defaults");
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::parse("learning_rate=0.1").is_err());
        assert!(TrainConfig::parse("lr=fast").is_err());
        assert!(TrainConfig::parse("epochs").is_err());
        assert!(TrainConfig::parse("tile_size=100").is_err());
        assert!(TrainConfig::parse("batch_size=0").is_err());
    }
}
