//! `key = value` run configuration shared by the CLI subcommands.
//!
//! One file drives training, synthesis, and evaluation. Keys mirror the
//! field names of [`TrainConfig`], [`BackboneConfig`], and [`SynthSpec`];
//! `seed` feeds both training and synthesis, `cbam_on` feeds both training
//! and the backbone. Later lines override earlier ones, `#` starts a
//! comment, unknown keys are errors.

use crate::backbone::BackboneConfig;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::train::TrainConfig;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::desk(),
            backbone: BackboneConfig::desk(4),
            synth: SynthSpec {
                class_counts: vec![200, 100, 40, 20],
                image_size: 32,
                noise_std: 0.3,
                seed: 1,
            },
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid flag {value:?} for key {key}, expected on/off"
        ))),
    }
}

pub fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let items: Result<Vec<usize>> = value
        .split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty list for key {key}")));
    }
    Ok(items)
}

impl RunConfig {
    /// Applies one `key = value` assignment. Shared keys fan out to every
    /// struct that carries the field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "lr_backbone" => self.train.lr_backbone = parse_num(key, value)?,
            "lr_classifier" => self.train.lr_classifier = parse_num(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "gamma" => self.train.gamma = parse_num(key, value)?,
            "flip_prob" => self.train.flip_prob = parse_num(key, value)?,
            "loss_mode" => self.train.loss_mode = value.parse()?,
            "weights_scheme" => self.train.weights_scheme = value.parse()?,
            "seed" => {
                let s = parse_num(key, value)?;
                self.train.seed = s;
                self.synth.seed = s;
            }
            "cbam_on" => {
                let b = parse_flag(key, value)?;
                self.train.cbam_on = b;
                self.backbone.cbam_on = b;
            }
            "stage_blocks" => self.backbone.stage_blocks = parse_usize_list(key, value)?,
            "base_channels" => self.backbone.base_channels = parse_num(key, value)?,
            "input_size" => self.backbone.input_size = parse_num(key, value)?,
            "in_channels" => self.backbone.in_channels = parse_num(key, value)?,
            "feature_dim" => self.backbone.feature_dim = parse_num(key, value)?,
            "num_classes" => self.backbone.num_classes = parse_num(key, value)?,
            "classifier_bias" => self.backbone.classifier_bias = parse_flag(key, value)?,
            "reduction_ratio" => self.backbone.cbam.reduction_ratio = parse_num(key, value)?,
            "spatial_kernel" => self.backbone.cbam.spatial_kernel = parse_num(key, value)?,
            "class_counts" => self.synth.class_counts = parse_usize_list(key, value)?,
            "image_size" => self.synth.image_size = parse_num(key, value)?,
            "noise_std" => self.synth.noise_std = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
        })?;
        cfg.set(key.trim(), value.trim())
            .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}
