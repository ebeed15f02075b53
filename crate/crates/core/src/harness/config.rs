use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{DepthBinSpec, Discretization};
use crate::error::{Error, Result};
use crate::lifting::Fusion;
use crate::scenes::AugmentParams;
use crate::toynet::ModelConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Flat training configuration. Every key has a default; a file only
/// needs the keys it changes plus `version`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,
    pub steps: u64,
    /// Number of training scenes used, taken in manifest order (0 = all).
    pub train_scenes: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of training after which the learning rate drops.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    /// Write an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: u64,

    pub channels: usize,
    pub depth_bins: usize,
    pub encoder_width: usize,
    pub refiner_width: usize,
    pub refiner_depth: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub discretization: Discretization,

    pub stereo_sfa: bool,
    pub oad: bool,
    pub distill: bool,
    /// Standard deviation in metres of Gaussian noise added to the depth
    /// maps that supervise the depth head, standing in for an estimated
    /// rather than rendered teacher (0 = exact depth).
    pub teacher_noise: f64,
    /// Mask empty voxels out of the semantic cross-entropy.
    pub sem_ignore_empty: bool,
    pub augment: bool,
    pub p_blur: f64,
    pub p_grayscale: f64,
    pub p_hue: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            seed: 0,
            steps: 1000,
            train_scenes: 0,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_drop_at: 2.0 / 3.0,
            lr_drop_factor: 0.1,
            checkpoint_every: 0,
            channels: 8,
            depth_bins: 16,
            encoder_width: 16,
            refiner_width: 16,
            refiner_depth: 1,
            d_min: 0.5,
            d_max: 12.0,
            discretization: Discretization::Lid,
            stereo_sfa: true,
            oad: true,
            distill: true,
            teacher_noise: 0.0,
            sem_ignore_empty: false,
            augment: false,
            p_blur: 0.5,
            p_grayscale: 0.2,
            p_hue: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for (key, raw) in overrides {
            // values parse as TOML; bare words fall back to strings
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            table.insert(key.clone(), value);
        }
        if !table.contains_key("version") {
            return Err(Error::Config("config is missing the version key".into()));
        }
        let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("lr and adam_eps must be positive, weight_decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) || !(self.lr_drop_factor > 0.0) {
            return Err(Error::Config("lr_drop_at must lie in [0, 1] and lr_drop_factor be positive".into()));
        }
        if !(self.teacher_noise >= 0.0) || !self.teacher_noise.is_finite() {
            return Err(Error::Config("teacher_noise must be finite and non-negative".into()));
        }
        self.bin_spec()?;
        self.model_config(0).validate()
    }

    pub fn bin_spec(&self) -> Result<DepthBinSpec> {
        DepthBinSpec::new(self.d_min, self.d_max, self.depth_bins, self.discretization)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self, n_classes: usize) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            depth_bins: self.depth_bins,
            n_classes: n_classes.max(1),
            encoder_width: self.encoder_width,
            refiner_width: self.refiner_width,
            refiner_depth: self.refiner_depth,
            seed: crate::seed::derive_seed(self.seed, "init", 0),
        }
    }

    pub fn fusion(&self) -> Fusion {
        if self.stereo_sfa {
            Fusion::default()
        } else {
            Fusion::Mean
        }
    }

    pub fn augment_params(&self) -> AugmentParams {
        AugmentParams { p_blur: self.p_blur, p_grayscale: self.p_grayscale, p_hue: self.p_hue, ..Default::default() }
    }

    /// Learning rate at `step` under the step-drop schedule.
    pub fn lr_at(&self, step: u64) -> f64 {
        let drop = (self.lr_drop_at * self.steps as f64).round() as u64;
        if self.steps > 0 && step >= drop {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}
