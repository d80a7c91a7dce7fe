//! Key=value configuration files.
//!
//! One flat text file configures both training and the architecture; keys
//! mirror the `TrainConfig` / `NetworkConfig` field names. Lines are
//! `key = value`, `#` starts a comment. The `SIGNET_SEED` environment
//! variable overrides the configured seed.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Result, SignetError};
use crate::fusion::ScanDirections;
use crate::model::{DensifierKind, FusionMode, NetworkConfig};
use crate::train::TrainConfig;

/// Parsed key=value file.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    map: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(SignetError::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SignetError::io(path, e))?;
        ConfigFile::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse_with<T>(&self, key: &str, default: T, f: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => f(raw).ok_or_else(|| {
                SignetError::Config(format!("invalid value {raw:?} for {key}"))
            }),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        self.parse_with(key, default, |s| match s {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        })
    }

    /// Architecture from the file: `scale = toy|paper` picks the preset,
    /// individual keys override single fields.
    pub fn network_config(&self) -> Result<NetworkConfig> {
        let mut cfg = match self.get("scale") {
            None | Some("toy") => NetworkConfig::toy(),
            Some("paper") => NetworkConfig::paper_scale(),
            Some(other) => {
                return Err(SignetError::Config(format!("unknown scale {other}")))
            }
        };
        cfg.base_channels = self.usize_or("base_channels", cfg.base_channels)?;
        cfg.num_residual_groups =
            self.usize_or("num_residual_groups", cfg.num_residual_groups)?;
        cfg.blocks_per_group = self.usize_or("blocks_per_group", cfg.blocks_per_group)?;
        cfg.dadf_iterations = self.usize_or("dadf_iterations", cfg.dadf_iterations)?;
        cfg.bands_n = self.usize_or("bands_n", cfg.bands_n)?;
        cfg.ssm_state_dim = self.usize_or("ssm_state_dim", cfg.ssm_state_dim)?;
        cfg.kernel_k = self.usize_or("kernel_k", cfg.kernel_k)?;
        cfg.degradation_channels =
            self.usize_or("degradation_channels", cfg.degradation_channels)?;
        cfg.ca_reduction = self.usize_or("ca_reduction", cfg.ca_reduction)?;
        cfg.denoise_sigma = self.f64_or("denoise_sigma", cfg.denoise_sigma)?;
        cfg.densify_enabled = self.bool_or("densify_enabled", cfg.densify_enabled)?;
        cfg.denoise_enabled = self.bool_or("denoise_enabled", cfg.denoise_enabled)?;
        cfg.bridge_enabled = self.bool_or("bridge_enabled", cfg.bridge_enabled)?;
        if let Some(mode) = self.get("fusion_mode") {
            cfg.fusion_mode = FusionMode::parse(mode)?;
        }
        if let Some(kind) = self.get("densifier") {
            cfg.densifier = DensifierKind::parse(kind)?;
        }
        if let Some(dirs) = self.get("scan_directions") {
            cfg.scan_directions = match dirs {
                "1" => ScanDirections::One,
                "2" => ScanDirections::Two,
                "4" => ScanDirections::Four,
                other => {
                    return Err(SignetError::Config(format!(
                        "scan_directions must be 1, 2, or 4, got {other}"
                    )))
                }
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training hyperparameters; `SIGNET_SEED` (when set) wins over the
    /// configured seed.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let mut cfg = TrainConfig {
            epochs: self.usize_or("epochs", d.epochs)?,
            beta1: self.f64_or("beta1", d.beta1)?,
            beta2: self.f64_or("beta2", d.beta2)?,
            learning_rate: self.f64_or("learning_rate", d.learning_rate)?,
            weight_decay: self.f64_or("weight_decay", d.weight_decay)?,
            lambda: self.f64_or("lambda", d.lambda)?,
            batch_size: self.usize_or("batch_size", d.batch_size)?,
            seed: self.u64_or("seed", d.seed)?,
            density: self.f64_or("density", d.density)?,
            crop_size: self.usize_or("crop_size", d.crop_size)?,
            augment: self.bool_or("augment", d.augment)?,
            max_steps: match self.get("max_steps") {
                None => None,
                Some(raw) => Some(raw.parse().map_err(|_| {
                    SignetError::Config(format!("invalid max_steps {raw:?}"))
                })?),
            },
            ld_detach_prediction: self.bool_or("ld_detach_prediction", d.ld_detach_prediction)?,
        };
        if let Ok(seed) = std::env::var("SIGNET_SEED") {
            cfg.seed = seed.parse().map_err(|_| {
                SignetError::Config(format!("SIGNET_SEED must be an integer, got {seed:?}"))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
