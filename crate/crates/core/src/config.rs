//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comments start with '#'
//! iterations = 600
//! center_scope = moving
//! ma_decay = 0.9
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::Replacement;
use crate::model::ModelConfig;
use crate::synth::SceneSpec;
use crate::train::{CenterMode, TrainConfig};

/// Everything one training run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub image_size: usize,
    pub noise_std: f64,
    pub data_seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    /// Moving-average decay used when `center_scope = moving`.
    pub ma_decay: f64,
}

pub const DEFAULT_DECAY: f64 = 0.9;

/// Recognised keys, in the order [`ExperimentConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "data_seed",
    "image_size",
    "noise_std",
    "train_count",
    "test_count",
    "channels",
    "head_kernel",
    "feature_dim",
    "iterations",
    "batch_size",
    "lr",
    "poly_power",
    "weight_decay",
    "momentum",
    "eps0",
    "eps1",
    "w_ce",
    "w_intra",
    "w_c2c",
    "w_c2p",
    "center_scope",
    "ma_decay",
    "detach_centers",
    "replacement",
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            image_size: SceneSpec::DEFAULT_SIZE,
            noise_std: SceneSpec::default_with(SceneSpec::DEFAULT_SIZE, 0).noise_std,
            data_seed: 0,
            train_count: 400,
            test_count: 100,
            ma_decay: DEFAULT_DECAY,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::invalid(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("bad value {value:?} for {key}: expected true or false"))),
    }
}

impl ExperimentConfig {
    pub fn scene(&self) -> SceneSpec {
        let mut spec = SceneSpec::default_with(self.image_size, self.data_seed);
        spec.noise_std = self.noise_std;
        spec
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "seed" => {
                let s = parse(key, value)?;
                self.model.seed = s;
                t.seed = s;
            }
            "data_seed" => self.data_seed = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "noise_std" => self.noise_std = parse(key, value)?,
            "train_count" => self.train_count = parse(key, value)?,
            "test_count" => self.test_count = parse(key, value)?,
            "channels" => {
                self.model.channels = value
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "head_kernel" => self.model.head_kernel = parse(key, value)?,
            "feature_dim" => self.model.feature_dim = parse(key, value)?,
            "iterations" => t.iterations = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.base_lr = parse(key, value)?,
            "poly_power" => t.poly_power = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "eps0" => t.thresholds.eps0 = parse(key, value)?,
            "eps1" => t.thresholds.eps1 = parse(key, value)?,
            "w_ce" => t.weights.ce = parse(key, value)?,
            "w_intra" => t.weights.intra_c2p = parse(key, value)?,
            "w_c2c" => t.weights.inter_c2c = parse(key, value)?,
            "w_c2p" => t.weights.inter_c2p = parse(key, value)?,
            "center_scope" => {
                let decay = self.ma_decay;
                self.train.centers = match value {
                    "image" => CenterMode::Image,
                    "batch" => CenterMode::Batch,
                    "moving" => CenterMode::Moving { decay },
                    _ => {
                        return Err(Error::invalid(format!(
                            "bad value {value:?} for center_scope: expected image, batch or moving"
                        )))
                    }
                }
            }
            "ma_decay" => {
                self.ma_decay = parse(key, value)?;
                if let CenterMode::Moving { decay } = &mut self.train.centers {
                    *decay = self.ma_decay;
                }
            }
            "detach_centers" => t.detach_centers = parse_bool(key, value)?,
            "replacement" => t.replacement = parse::<Replacement>(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "seed" => t.seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "noise_std" => self.noise_std.to_string(),
            "train_count" => self.train_count.to_string(),
            "test_count" => self.test_count.to_string(),
            "channels" => self
                .model
                .channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "head_kernel" => self.model.head_kernel.to_string(),
            "feature_dim" => self.model.feature_dim.to_string(),
            "iterations" => t.iterations.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.base_lr.to_string(),
            "poly_power" => t.poly_power.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "momentum" => t.momentum.to_string(),
            "eps0" => t.thresholds.eps0.to_string(),
            "eps1" => t.thresholds.eps1.to_string(),
            "w_ce" => t.weights.ce.to_string(),
            "w_intra" => t.weights.intra_c2p.to_string(),
            "w_c2c" => t.weights.inter_c2c.to_string(),
            "w_c2p" => t.weights.inter_c2p.to_string(),
            "center_scope" => match t.centers {
                CenterMode::Image => "image",
                CenterMode::Batch => "batch",
                CenterMode::Moving { .. } => "moving",
            }
            .to_string(),
            "ma_decay" => self.ma_decay.to_string(),
            "detach_centers" => t.detach_centers.to_string(),
            "replacement" => t.replacement.to_string(),
            _ => return None,
        })
    }

    /// Apply a config file's text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                format: "config",
                reason: format!("line {}: expected `key = value`", n + 1),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Format {
                format: "config",
                reason: format!("line {}: {e}", n + 1),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its current value; `from_text` of this is `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene().validate()?;
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::invalid("train_count and test_count must be at least 1"));
        }
        if self.model.n_class != self.scene().n_class {
            return Err(Error::invalid("model and scene disagree on the class count"));
        }
        Ok(())
    }
}
