//! Flat key=value configuration with `#` comments. Unknown keys are
//! rejected by name so typos cannot silently fall back to defaults.

use std::path::Path;

use crate::error::{AmsnError, Result};
use crate::metrics::ThresholdRule;
use crate::msfe::MiwgMode;

/// How single-channel depth/thermal images become three-channel inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GrayToRgb {
    /// Copy the channel three times (information-preserving default).
    #[default]
    Replicate,
    /// Map intensity through a fixed blue-green-red ramp.
    Colormap,
}

impl GrayToRgb {
    pub fn parse(s: &str) -> Option<GrayToRgb> {
        match s.to_ascii_lowercase().as_str() {
            "replicate" => Some(GrayToRgb::Replicate),
            "colormap" => Some(GrayToRgb::Colormap),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GrayToRgb::Replicate => "replicate",
            GrayToRgb::Colormap => "colormap",
        }
    }
}

/// Architecture plus preprocessing: everything inference needs to rebuild
/// the network from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Modality-universe size K.
    pub k: usize,
    /// Backbone widths C_1..C_5, strictly increasing.
    pub widths: [usize; 5],
    pub miwg_mode: MiwgMode,
    /// Square training/inference resolution; must be divisible by 32.
    pub image_size: usize,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    pub gray_to_rgb: GrayToRgb,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 3,
            widths: [16, 32, 64, 128, 256],
            miwg_mode: MiwgMode::Recursive,
            image_size: 64,
            norm_mean: [0.485, 0.456, 0.406],
            norm_std: [0.229, 0.224, 0.225],
            gray_to_rgb: GrayToRgb::Replicate,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 3 {
            return Err(AmsnError::Usage(format!(
                "modality_count must be >= 3 to cover RGB/D/T, got {}",
                self.k
            )));
        }
        if !self.widths.windows(2).all(|w| w[0] < w[1]) {
            return Err(AmsnError::Usage(format!(
                "widths must be strictly increasing, got {:?}",
                self.widths
            )));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(AmsnError::Usage(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if self.norm_std.iter().any(|&v| v <= 0.0) {
            return Err(AmsnError::Usage("norm_std components must be positive".into()));
        }
        Ok(())
    }
}

/// Full run configuration: model, optimizer, schedule, sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub augment: bool,
    /// Checkpoint every N epochs; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub fbeta_threshold: ThresholdRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            seed: 0,
            batch_size: 8,
            epochs: 40,
            learning_rate: 2e-3,
            weight_decay: 5e-4,
            momentum: 0.9,
            lr_decay_factor: 0.8,
            lr_decay_every: 20,
            augment: true,
            checkpoint_every: 0,
            fbeta_threshold: ThresholdRule::AdaptiveTwiceMean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.learning_rate <= 0.0 {
            return Err(AmsnError::Usage(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(AmsnError::Usage(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(AmsnError::Usage("lr_decay_every must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(AmsnError::Usage("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AmsnError::Usage(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            AmsnError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                AmsnError::Usage(format!(
                    "{}:{}: expected key=value, got `{raw}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key=value` override. Unknown keys are rejected by name.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| AmsnError::Usage(format!("config key `{key}`: {what} (got `{value}`)"));
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad("expected integer"))?,
            "image_size" => {
                self.model.image_size = value.parse().map_err(|_| bad("expected integer"))?
            }
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("expected integer"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("expected integer"))?,
            "learning_rate" => {
                self.learning_rate = value.parse().map_err(|_| bad("expected float"))?
            }
            "weight_decay" => {
                self.weight_decay = value.parse().map_err(|_| bad("expected float"))?
            }
            "momentum" => self.momentum = value.parse().map_err(|_| bad("expected float"))?,
            "lr_decay_factor" => {
                self.lr_decay_factor = value.parse().map_err(|_| bad("expected float"))?
            }
            "lr_decay_every" => {
                self.lr_decay_every = value.parse().map_err(|_| bad("expected integer"))?
            }
            "augment" => {
                self.augment = match value.to_ascii_lowercase().as_str() {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(bad("expected true/false")),
                }
            }
            "checkpoint_every" => {
                self.checkpoint_every = value.parse().map_err(|_| bad("expected integer"))?
            }
            "modality_count" => self.model.k = value.parse().map_err(|_| bad("expected integer"))?,
            "widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("expected five comma-separated integers"))?;
                self.model.widths = parts
                    .try_into()
                    .map_err(|_| bad("expected exactly five widths"))?;
            }
            "miwg_mode" => {
                self.model.miwg_mode =
                    MiwgMode::parse(value).ok_or_else(|| bad("expected recursive|indicator"))?
            }
            "norm_mean" => self.model.norm_mean = parse_three(value).ok_or_else(|| bad("expected three floats"))?,
            "norm_std" => self.model.norm_std = parse_three(value).ok_or_else(|| bad("expected three floats"))?,
            "gray_to_rgb" => {
                self.model.gray_to_rgb =
                    GrayToRgb::parse(value).ok_or_else(|| bad("expected replicate|colormap"))?
            }
            "fbeta_threshold" => {
                self.fbeta_threshold = ThresholdRule::parse(value)
                    .ok_or_else(|| bad("expected `adaptive` or a float"))?
            }
            other => {
                return Err(AmsnError::Usage(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }
}

fn parse_three(value: &str) -> Option<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<_>>()?;
    parts.try_into().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let mut cfg = TrainConfig::default();
        let err = cfg.apply("learning_rte", "0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rte"));
    }

    #[test]
    fn file_round_trip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# desk-scale run\nseed = 7\nimage_size = 64\nwidths = 8,16,32,64,128\nmiwg_mode = indicator\nlearning_rate = 1e-3 # small\n",
        )
        .unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.widths, [8, 16, 32, 64, 128]);
        assert_eq!(cfg.model.miwg_mode, MiwgMode::Indicator);
        assert_eq!(cfg.learning_rate, 1e-3);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.weight_decay, 5e-4);
    }

    #[test]
    fn validation_rejects_bad_schedules_and_sizes() {
        let mut cfg = TrainConfig::default();
        cfg.lr_decay_factor = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lr_decay_factor = 0.8;
        cfg.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
        cfg.learning_rate = 2e-3;
        cfg.model.image_size = 50;
        assert!(cfg.validate().is_err());
        cfg.model.image_size = 96;
        assert!(cfg.validate().is_ok());
    }
}
