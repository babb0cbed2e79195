//! `key = value` training configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; missing
//! keys keep the [`TrainConfig::default`] value (momentum 0.9, weight decay
//! 0.0001, and the reference toy task). Unknown and repeated keys are errors.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::error::{ConfigError, Error, Result};
use crate::toy::TrainConfig;

pub const KEYS: [&str; 16] = [
    "scenes_per_epoch",
    "epochs",
    "rois",
    "classes",
    "d",
    "d_f",
    "d_g",
    "h",
    "w",
    "noise",
    "lr",
    "momentum",
    "weight_decay",
    "seed",
    "hidden",
    "eval_scenes",
];

pub fn parse_config_str(text: &str) -> Result<TrainConfig, ConfigError> {
    let mut config = TrainConfig::default();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                text: raw.to_string(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.to_string(),
            });
        }
        set(&mut config, line, key, value)?;
    }
    config.validate()?;
    Ok(config)
}

fn parse<V: FromStr>(line: usize, key: &str, value: &str) -> Result<V, ConfigError> {
    value.parse().map_err(|_| {
        // A negative count is a range problem, not a syntax problem.
        if value.starts_with('-') && value[1..].parse::<u64>().is_ok() {
            ConfigError::Range {
                key: KEYS.iter().find(|k| **k == key).copied().unwrap_or("value"),
                msg: format!("must be non-negative, got {value}"),
            }
        } else {
            ConfigError::Parse {
                line,
                key: key.to_string(),
                value: value.to_string(),
            }
        }
    })
}

fn set(config: &mut TrainConfig, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
    match key {
        "scenes_per_epoch" => config.scenes_per_epoch = parse(line, key, value)?,
        "epochs" => config.epochs = parse(line, key, value)?,
        "rois" => config.rois = parse(line, key, value)?,
        "classes" => config.classes = parse(line, key, value)?,
        "d" => config.d = parse(line, key, value)?,
        "d_f" => config.d_f = parse(line, key, value)?,
        "d_g" => config.d_g = parse(line, key, value)?,
        "h" => config.h = parse(line, key, value)?,
        "w" => config.w = parse(line, key, value)?,
        "noise" => config.noise = parse(line, key, value)?,
        "lr" => config.lr = parse(line, key, value)?,
        "momentum" => config.momentum = parse(line, key, value)?,
        "weight_decay" => config.weight_decay = parse(line, key, value)?,
        "seed" => config.seed = parse(line, key, value)?,
        "hidden" => config.hidden = parse(line, key, value)?,
        "eval_scenes" => config.eval_scenes = parse(line, key, value)?,
        _ => unreachable!("key list checked by caller"),
    }
    Ok(())
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_config_str(&text)?)
}
