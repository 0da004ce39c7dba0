//! `key=value` run configuration with namespaced keys.

use std::fs;
use std::path::Path;

use crate::data::SynthConfig;
use crate::engine::{Optimizer, TrainConfig};
use crate::error::{Error, Result};
use crate::glimpse::GlimpseSettings;
use crate::model::{Fusion, ModelConfig};

/// Every key a config file or `--set` may name.
pub const KEYS: &[&str] = &[
    "model.fusion",
    "model.gated",
    "model.encoder_filters",
    "model.decoder_filters",
    "model.kernel",
    "model.input_channels",
    "model.input_size",
    "train.steps",
    "train.batch_size",
    "train.learning_rate",
    "train.optimizer",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.seed",
    "train.eval_every",
    "train.beta",
    "train.epsilon",
    "train.deterministic",
    "train.threshold",
    "glimpse.u",
    "glimpse.s",
    "glimpse.d",
    "data.seed",
    "data.count",
    "data.height",
    "data.width",
    "data.change_fraction",
    "data.test_count",
];

/// Settings for the synthetic generator and the train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub change_fraction: f64,
    pub test_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seed: 0,
            count: 16,
            height: 64,
            width: 64,
            change_fraction: 0.1,
            test_count: 4,
        }
    }
}

impl DataSection {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            count: self.count,
            height: self.height,
            width: self.width,
            change_fraction: self.change_fraction,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// `None` takes the size of the training images.
    pub input_size: Option<(usize, usize)>,
    /// Set when the file or an override names `model.decoder_filters`.
    decoder_explicit: bool,
    pub train: TrainConfig,
    pub glimpse: GlimpseSettings,
    pub data: DataSection,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("config key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Format(format!("config key `{key}`: `{value}` is not a boolean"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// `HxW` or a single side for square inputs.
pub fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    match value.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(key, h.trim())?, parse(key, w.trim())?)),
        None => {
            let n = parse(key, value)?;
            Ok((n, n))
        }
    }
}

impl RunConfig {
    /// Applies one `key=value` setting; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "model.fusion" => self.model.fusion = value.parse::<Fusion>()?,
            "model.gated" => self.model.gated = parse_bool(key, value)?,
            "model.encoder_filters" => {
                self.model.encoder_filters = parse_list(key, value)?;
                if !self.decoder_explicit {
                    self.model.decoder_filters = self.model.encoder_filters.iter().rev().copied().collect();
                }
            }
            "model.decoder_filters" => {
                self.model.decoder_filters = parse_list(key, value)?;
                self.decoder_explicit = true;
            }
            "model.kernel" => self.model.kernel = parse(key, value)?,
            "model.input_channels" => self.model.input_channels = parse(key, value)?,
            "model.input_size" => {
                self.input_size = if value == "auto" {
                    None
                } else {
                    Some(parse_size(key, value)?)
                }
            }
            "train.steps" => self.train.steps = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.optimizer" => {
                self.train.optimizer = match (value.parse::<Optimizer>()?, self.train.optimizer) {
                    (Optimizer::Adam { .. }, current @ Optimizer::Adam { .. }) => current,
                    (new, _) => new,
                }
            }
            "train.adam_beta1" | "train.adam_beta2" | "train.adam_eps" => {
                let v: f64 = parse(key, value)?;
                let Optimizer::Adam { beta1, beta2, eps } = self.train.optimizer else {
                    return Err(Error::Format(format!(
                        "config key `{key}` requires train.optimizer=adam"
                    )));
                };
                self.train.optimizer = match key {
                    "train.adam_beta1" => Optimizer::Adam { beta1: v, beta2, eps },
                    "train.adam_beta2" => Optimizer::Adam { beta1, beta2: v, eps },
                    _ => Optimizer::Adam { beta1, beta2, eps: v },
                };
            }
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.eval_every" => self.train.eval_every = parse(key, value)?,
            "train.beta" => {
                self.train.beta = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "train.epsilon" => self.train.epsilon = parse(key, value)?,
            "train.deterministic" => self.train.deterministic = parse_bool(key, value)?,
            "train.threshold" => self.train.threshold = parse(key, value)?,
            "glimpse.u" => self.glimpse.u = parse(key, value)?,
            "glimpse.s" => self.glimpse.s = parse(key, value)?,
            "glimpse.d" => self.glimpse.d = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            "data.count" => self.data.count = parse(key, value)?,
            "data.height" => self.data.height = parse(key, value)?,
            "data.width" => self.data.width = parse(key, value)?,
            "data.change_fraction" => self.data.change_fraction = parse(key, value)?,
            "data.test_count" => self.data.test_count = parse(key, value)?,
            _ => return Err(Error::Format(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `KEY=VALUE` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("override `{pair}` is not KEY=VALUE")))?;
        self.set(k.trim(), v)
    }

    /// Applies every line of a config text. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Format(format!("config {}: {e}", path.display())))?;
        self.apply_text(&text)
            .map_err(|e| Error::Format(format!("config {}: {e}", path.display())))
    }

    /// Defaults, then the optional file, then overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for o in overrides {
            cfg.set_pair(o)?;
        }
        Ok(cfg)
    }

    /// The model config with `input_size` resolved against the training images.
    pub fn model_for(&self, data_size: (usize, usize)) -> ModelConfig {
        ModelConfig {
            input_size: self.input_size.unwrap_or(data_size),
            ..self.model.clone()
        }
    }
}
