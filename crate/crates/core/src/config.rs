//! Flat `key = value` run settings.
//!
//! Settings are layered: defaults, then a config file, then explicit
//! overrides (for example command-line flags), each applied with
//! [`Settings::set`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::circle::FactorSet;
use crate::data::Unit;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown setting `{0}`")]
    UnknownKey(String),
    #[error("setting `{key}`: invalid value `{value}`")]
    Value { key: String, value: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stride: usize,
    pub k: usize,
    pub unit: Unit,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            stride: 1,
            k: 20,
            unit: Unit::Meters,
        }
    }
}

pub const KEYS: &[&str] = &[
    "t_h",
    "t_f",
    "stride",
    "n_partitions",
    "factors",
    "neighbor_cap",
    "step_seconds",
    "d",
    "d_sc",
    "n_layers",
    "n_heads",
    "noise_dim",
    "use_socialcircle",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "checkpoint_every",
    "k",
    "unit",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        value: value.into(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.into(),
            value: value.into(),
        }),
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key.trim() {
            "t_h" => {
                self.model.t_h = parse(key, value)?;
                self.model.partition.t_h = self.model.t_h;
            }
            "t_f" => self.model.t_f = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "n_partitions" => self.model.partition.n_partitions = parse(key, value)?,
            "factors" => self.model.partition.factors = parse::<FactorSet>(key, value)?,
            "neighbor_cap" => self.model.partition.neighbor_cap = parse(key, value)?,
            "step_seconds" => self.model.partition.step_seconds = parse(key, value)?,
            "d" => self.model.d = parse(key, value)?,
            "d_sc" => self.model.d_sc = parse(key, value)?,
            "n_layers" => self.model.n_layers = parse(key, value)?,
            "n_heads" => self.model.n_heads = parse(key, value)?,
            "noise_dim" => self.model.noise_dim = parse(key, value)?,
            "use_socialcircle" => self.model.use_socialcircle = parse_bool(key, value)?,
            "lr" | "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "unit" => self.unit = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let m = &self.model;
        let t = &self.train;
        BTreeMap::from([
            ("t_h", m.t_h.to_string()),
            ("t_f", m.t_f.to_string()),
            ("stride", self.stride.to_string()),
            ("n_partitions", m.partition.n_partitions.to_string()),
            ("factors", m.partition.factors.to_string()),
            ("neighbor_cap", m.partition.neighbor_cap.to_string()),
            ("step_seconds", format!("{:?}", m.partition.step_seconds)),
            ("d", m.d.to_string()),
            ("d_sc", m.d_sc.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("noise_dim", m.noise_dim.to_string()),
            ("use_socialcircle", m.use_socialcircle.to_string()),
            ("lr", format!("{:?}", t.learning_rate)),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("k", self.k.to_string()),
            ("unit", self.unit.to_string()),
        ])
    }

    /// The settings as config-file text; [`Settings::apply_text`] reads it back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }
}
