//! Run configuration: a flat `key = value` text format with optional
//! `[section]` headers, two built-in presets, and strict key checking so a
//! typo fails loudly instead of silently training with a default.

use crate::error::ConfigError;
use serde::{Deserialize, Serialize};

/// Everything the trainers and evaluator read. Loss coefficients follow the
/// total objectives: `fusion_weight`·fusion + `spatial_weight`·feature +
/// `temporal_weight`·temporal on top of the unit-weight attention and flow
/// terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Samples (target frame + neighbors, one crop) per optimizer step.
    pub batch: usize,
    /// Steps per epoch; each step draws `batch` fresh (clip, frame, crop)
    /// triples.
    pub steps_per_epoch: usize,
    /// Neighbor radius: frames t−r..=t+r feed the restoration of frame t.
    pub neighbor_radius: usize,
    /// Side of the square training crop; must be divisible by 8 (network
    /// stride) and no larger than the corpus frames.
    pub crop: usize,
    /// Decay for earlier fusion iterates in the fusion loss.
    pub gamma: f64,
    pub fusion_weight: f64,
    pub spatial_weight: f64,
    pub temporal_weight: f64,
    /// Sharpness of the occlusion down-weighting in the temporal loss.
    pub mu: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale preset: small crops and few epochs so the full two-stage
    /// schedule runs on one CPU core in minutes.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch: 8,
            steps_per_epoch: 4,
            neighbor_radius: 2,
            crop: 48,
            gamma: 0.8,
            fusion_weight: 100.0,
            spatial_weight: 10.0,
            temporal_weight: 10.0,
            mu: 0.02,
            epochs_stage1: 40,
            epochs_stage2: 10,
            seed: 7,
        }
    }

    /// Full-scale preset, kept for documentation; running it is far outside
    /// a desktop budget.
    pub fn paper() -> TrainConfig {
        TrainConfig {
            lr: 1e-4,
            steps_per_epoch: 75,
            crop: 256,
            epochs_stage1: 300,
            epochs_stage2: 50,
            ..TrainConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<TrainConfig, ConfigError> {
        match name {
            "desk" => Ok(TrainConfig::desk()),
            "paper" => Ok(TrainConfig::paper()),
            other => Err(ConfigError::BadValue {
                key: "preset".into(),
                detail: format!("no preset named `{other}`; expected desk or paper"),
            }),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive: [(&str, f64); 7] = [
            ("lr", self.lr),
            ("gamma", self.gamma),
            ("fusion_weight", self.fusion_weight),
            ("spatial_weight", self.spatial_weight),
            ("temporal_weight", self.temporal_weight),
            ("mu", self.mu),
            ("beta1", self.beta1),
        ];
        for (key, v) in positive {
            if !(v > 0.0) {
                return Err(ConfigError::BadValue { key: key.into(), detail: format!("must be > 0, got {v}") });
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(ConfigError::BadValue { key: key.into(), detail: format!("must be in (0, 1), got {v}") });
            }
        }
        for (key, v) in [
            ("batch", self.batch),
            ("steps_per_epoch", self.steps_per_epoch),
            ("epochs_stage1", self.epochs_stage1),
            ("epochs_stage2", self.epochs_stage2),
            ("neighbor_radius", self.neighbor_radius),
        ] {
            if v == 0 {
                return Err(ConfigError::BadValue { key: key.into(), detail: "must be at least 1".into() });
            }
        }
        if self.crop == 0 || self.crop % 8 != 0 {
            return Err(ConfigError::BadValue {
                key: "crop".into(),
                detail: format!("must be a positive multiple of 8, got {}", self.crop),
            });
        }
        Ok(())
    }

    /// Parse config text. A `preset = desk|paper` line (anywhere) selects
    /// the base; remaining keys override individual fields. `#` starts a
    /// comment, `[section]` lines are organizational and ignored, keys may
    /// appear at most once.
    pub fn from_text(text: &str) -> Result<TrainConfig, ConfigError> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: ln + 1,
                    detail: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if value.is_empty() {
                return Err(ConfigError::Parse { line: ln + 1, detail: format!("empty value for `{key}`") });
            }
            if pairs.iter().any(|(_, k, _)| *k == key) {
                return Err(ConfigError::Parse { line: ln + 1, detail: format!("duplicate key `{key}`") });
            }
            pairs.push((ln + 1, key, value));
        }

        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "preset") {
            Some((_, _, name)) => TrainConfig::preset(name)?,
            None => TrainConfig::desk(),
        };
        for (_, key, value) in &pairs {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                detail: format!("cannot parse `{value}`"),
            })
        }
        match key {
            "preset" => {} // consumed before field overrides
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = num(key, value)?,
            "neighbor_radius" => self.neighbor_radius = num(key, value)?,
            "crop" => self.crop = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "fusion_weight" => self.fusion_weight = num(key, value)?,
            "spatial_weight" => self.spatial_weight = num(key, value)?,
            "temporal_weight" => self.temporal_weight = num(key, value)?,
            "mu" => self.mu = num(key, value)?,
            "epochs_stage1" => self.epochs_stage1 = num(key, value)?,
            "epochs_stage2" => self.epochs_stage2 = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(ConfigError::UnknownKey { key: other.into() }),
        }
        Ok(())
    }

    /// Canonical text form; `from_text(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        format!(
            "[optimizer]\n\
             lr = {}\n\
             beta1 = {}\n\
             beta2 = {}\n\
             \n\
             [schedule]\n\
             batch = {}\n\
             steps_per_epoch = {}\n\
             epochs_stage1 = {}\n\
             epochs_stage2 = {}\n\
             seed = {}\n\
             \n\
             [model]\n\
             neighbor_radius = {}\n\
             crop = {}\n\
             \n\
             [loss]\n\
             gamma = {}\n\
             fusion_weight = {}\n\
             spatial_weight = {}\n\
             temporal_weight = {}\n\
             mu = {}\n",
            self.lr,
            self.beta1,
            self.beta2,
            self.batch,
            self.steps_per_epoch,
            self.epochs_stage1,
            self.epochs_stage2,
            self.seed,
            self.neighbor_radius,
            self.crop,
            self.gamma,
            self.fusion_weight,
            self.spatial_weight,
            self.temporal_weight,
            self.mu,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_differ_where_documented() {
        let desk = TrainConfig::desk();
        let paper = TrainConfig::paper();
        desk.validate().unwrap();
        paper.validate().unwrap();
        assert_eq!(paper.lr, 1e-4);
        assert_eq!(paper.crop, 256);
        assert_eq!(paper.epochs_stage1, 300);
        assert_eq!(paper.epochs_stage2, 50);
        assert_eq!(paper.batch, 8);
        assert_eq!(paper.gamma, 0.8);
        assert_eq!(paper.fusion_weight, 100.0);
        assert_eq!(paper.spatial_weight, 10.0);
        assert_eq!(paper.temporal_weight, 10.0);
        assert_eq!(paper.mu, 0.02);
        assert_eq!(paper.neighbor_radius, 2);
        assert!(desk.crop < paper.crop);
    }

    #[test]
    fn text_round_trips_exactly() {
        let desk = TrainConfig::desk();
        assert_eq!(TrainConfig::from_text(&desk.to_text()).unwrap(), desk);
        let paper = TrainConfig::paper();
        assert_eq!(TrainConfig::from_text(&paper.to_text()).unwrap(), paper);
    }

    #[test]
    fn preset_plus_overrides_and_comments_parse() {
        let cfg = TrainConfig::from_text(
            "# training run\npreset = paper\n[schedule]\nepochs_stage1 = 3 # short\nseed = 99\n",
        )
        .unwrap();
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.epochs_stage1, 3);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.crop, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = TrainConfig::from_text("lerning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { ref key } if key == "lerning_rate"), "{err}");
    }

    #[test]
    fn malformed_lines_duplicates_and_bad_values_are_rejected() {
        assert!(matches!(
            TrainConfig::from_text("lr\n").unwrap_err(),
            ConfigError::Parse { line: 1, .. }
        ));
        assert!(matches!(
            TrainConfig::from_text("lr = 0.001\nlr = 0.01\n").unwrap_err(),
            ConfigError::Parse { line: 2, .. }
        ));
        assert!(matches!(
            TrainConfig::from_text("lr = fast\n").unwrap_err(),
            ConfigError::BadValue { ref key, .. } if key == "lr"
        ));
        assert!(matches!(
            TrainConfig::from_text("preset = gpu_cluster\n").unwrap_err(),
            ConfigError::BadValue { ref key, .. } if key == "preset"
        ));
    }

    #[test]
    fn validation_rejects_out_of_range_fields() {
        let mut c = TrainConfig::desk();
        c.gamma = 0.0;
        assert!(matches!(c.validate().unwrap_err(), ConfigError::BadValue { ref key, .. } if key == "gamma"));

        let mut c = TrainConfig::desk();
        c.crop = 44;
        assert!(matches!(c.validate().unwrap_err(), ConfigError::BadValue { ref key, .. } if key == "crop"));

        let mut c = TrainConfig::desk();
        c.neighbor_radius = 0;
        assert!(c.validate().is_err());

        let mut c = TrainConfig::desk();
        c.beta2 = 1.0;
        assert!(matches!(c.validate().unwrap_err(), ConfigError::BadValue { ref key, .. } if key == "beta2"));
    }
}
