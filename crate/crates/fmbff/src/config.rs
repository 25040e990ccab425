//! Run configuration as plain `key = value` lines with dotted keys.
//!
//! ```text
//! # compact desk model
//! model.encoder_widths = 8,16,32,64
//! train.lr0 = 0.001
//! data.augment = random
//! ```
//!
//! Keys not listed in [`KEYS`] are rejected, as are repeated keys.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use fmbff_core::model::{ModelConfig, SkipMode};
use fmbff_core::train::TrainConfig;
use fmbff_core::Error as CoreError;

use crate::error::Result;

/// How the training split is augmented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AugmentMode {
    #[default]
    None,
    /// One random grid variant per sample and epoch.
    Random,
    /// Every sample replaced by its full 36-variant grid before training.
    Expand,
}

impl AugmentMode {
    pub fn name(self) -> &'static str {
        match self {
            AugmentMode::None => "none",
            AugmentMode::Random => "random",
            AugmentMode::Expand => "expand",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Fraction of ids used for training.
    pub split_ratio: f64,
    pub seed: u64,
    pub augment: AugmentMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            split_ratio: 0.8,
            seed: 0,
            augment: AugmentMode::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub const KEYS: &[&str] = &[
    "model.in_channels",
    "model.input_size",
    "model.encoder_widths",
    "model.decoder_widths",
    "model.vitm.heads",
    "model.fmcab.reduction",
    "model.fmcab.p_exponent",
    "model.biffm.shuffle_groups",
    "model.skip_mode",
    "model.seed",
    "train.lr0",
    "train.max_epochs",
    "train.max_steps",
    "train.target_val_dice",
    "train.plateau_patience",
    "train.plateau_factor",
    "train.early_stop_patience",
    "train.batch_size",
    "train.loss_weights.bce",
    "train.loss_weights.dice",
    "train.seed",
    "data.split_ratio",
    "data.seed",
    "data.augment",
];

fn bad(key: &str, detail: impl Into<String>) -> CoreError {
    CoreError::config(key, detail)
}

fn num<V: FromStr>(key: &str, v: &str) -> Result<V, CoreError> {
    v.parse().map_err(|_| bad(key, format!("cannot parse `{}`", v)))
}

fn list<const N: usize>(key: &str, v: &str) -> Result<[usize; N], CoreError> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(bad(key, format!("expected {} comma-separated values, got {}", N, parts.len())));
    }
    let mut out = [0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = num(key, p)?;
    }
    Ok(out)
}

fn optional<V: FromStr>(key: &str, v: &str) -> Result<Option<V>, CoreError> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), CoreError> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "model.in_channels" => m.in_channels = num(key, v)?,
            "model.input_size" => {
                let [h, w] = list::<2>(key, v)?;
                m.input_size = (h, w);
            }
            "model.encoder_widths" => m.encoder_widths = list(key, v)?,
            "model.decoder_widths" => m.decoder_widths = list(key, v)?,
            "model.vitm.heads" => m.vitm.heads = num(key, v)?,
            "model.fmcab.reduction" => m.fmcab.reduction = num(key, v)?,
            "model.fmcab.p_exponent" => m.fmcab.p_exponent = num(key, v)?,
            "model.biffm.shuffle_groups" => m.biffm.shuffle_groups = num(key, v)?,
            "model.skip_mode" => {
                m.skip_mode = SkipMode::from_name(v)
                    .ok_or_else(|| bad(key, format!("`{}` is not literal_s4 or stage_matched", v)))?
            }
            "model.seed" => m.seed = num(key, v)?,
            "train.lr0" => t.lr0 = num(key, v)?,
            "train.max_epochs" => t.max_epochs = num(key, v)?,
            "train.max_steps" => t.max_steps = optional(key, v)?,
            "train.target_val_dice" => t.target_val_dice = optional(key, v)?,
            "train.plateau_patience" => t.plateau_patience = num(key, v)?,
            "train.plateau_factor" => t.plateau_factor = num(key, v)?,
            "train.early_stop_patience" => t.early_stop_patience = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.loss_weights.bce" => t.loss_weights.bce = num(key, v)?,
            "train.loss_weights.dice" => t.loss_weights.dice = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "data.split_ratio" => d.split_ratio = num(key, v)?,
            "data.seed" => d.seed = num(key, v)?,
            "data.augment" => {
                d.augment = match v {
                    "none" => AugmentMode::None,
                    "random" => AugmentMode::Random,
                    "expand" => AugmentMode::Expand,
                    _ => return Err(bad(key, format!("`{}` is not none, random or expand", v))),
                }
            }
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(&format!("line {}", n + 1), format!("expected `key = value`, got `{}`", line)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(bad(key, "key given more than once").into());
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let r = self.data.split_ratio;
        if !(r > 0.0 && r < 1.0) {
            return Err(bad("data.split_ratio", format!("must lie in (0, 1), got {}", r)).into());
        }
        Ok(())
    }

    /// Canonical text form listing every key; parses back to `self`.
    pub fn render(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let rows: Vec<(&str, String)> = vec![
            ("model.in_channels", m.in_channels.to_string()),
            ("model.input_size", join(&[m.input_size.0, m.input_size.1])),
            ("model.encoder_widths", join(&m.encoder_widths)),
            ("model.decoder_widths", join(&m.decoder_widths)),
            ("model.vitm.heads", m.vitm.heads.to_string()),
            ("model.fmcab.reduction", m.fmcab.reduction.to_string()),
            ("model.fmcab.p_exponent", m.fmcab.p_exponent.to_string()),
            ("model.biffm.shuffle_groups", m.biffm.shuffle_groups.to_string()),
            ("model.skip_mode", m.skip_mode.name().into()),
            ("model.seed", m.seed.to_string()),
            ("train.lr0", t.lr0.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.max_steps", opt(t.max_steps.map(|v| v.to_string()))),
            ("train.target_val_dice", opt(t.target_val_dice.map(|v| v.to_string()))),
            ("train.plateau_patience", t.plateau_patience.to_string()),
            ("train.plateau_factor", t.plateau_factor.to_string()),
            ("train.early_stop_patience", t.early_stop_patience.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.loss_weights.bce", t.loss_weights.bce.to_string()),
            ("train.loss_weights.dice", t.loss_weights.dice.to_string()),
            ("train.seed", t.seed.to_string()),
            ("data.split_ratio", d.split_ratio.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.augment", d.augment.name().into()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{} = {}", k, v);
        }
        out
    }
}
