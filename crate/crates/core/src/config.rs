//! Flat `key=value` run configuration. Blank lines and `#` comments are
//! ignored; unknown keys are errors.

use std::path::Path;
use std::str::FromStr;

use crate::data::DatasetConfig;
use crate::training::{TaskInputMode, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}")]
    Value { key: String, value: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DatasetConfig,
    /// Probability used by the editing experiment's label corruption.
    pub corruption: f64,
    pub sweep: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DatasetConfig::default(),
            corruption: 0.3,
            sweep: crate::eval::DEFAULT_SWEEP.to_vec(),
        }
    }
}

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value { key: key.into(), value: value.into() })
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply(&parse_pairs(&std::fs::read_to_string(path)?)?)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        // epochs first so the derived swap and warmup defaults follow it
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "epochs") {
            let epochs: usize = parse("epochs", v)?;
            let fresh = TrainConfig::with_epochs(epochs);
            self.train.epochs = epochs;
            self.train.swap_epoch = fresh.swap_epoch;
            self.train.warmup_epochs = fresh.warmup_epochs;
        }
        for (k, v) in pairs {
            let t = &mut self.train;
            let m = &mut t.model;
            let d = &mut self.data;
            match k.as_str() {
                "epochs" => {}
                "batch_size" => t.batch_size = parse(k, v)?,
                "seed" => t.seed = parse(k, v)?,
                "warmup_epochs" => t.warmup_epochs = parse(k, v)?,
                "swap_epoch" => t.swap_epoch = if v == "none" { None } else { Some(parse(k, v)?) },
                "randint_prob" => t.randint_prob = parse(k, v)?,
                "lr" | "base_lr" => t.base_lr = parse(k, v)?,
                "min_lr" => t.min_lr = parse(k, v)?,
                "beta1" => t.optimizer.beta1 = parse(k, v)?,
                "beta2" => t.optimizer.beta2 = parse(k, v)?,
                "eps" => t.optimizer.eps = parse(k, v)?,
                "weight_decay" => t.optimizer.weight_decay = parse(k, v)?,
                "task_input" => {
                    t.task_input = match v.as_str() {
                        "randint" => TaskInputMode::RandInt,
                        "observed" => TaskInputMode::Observed,
                        _ => return Err(ConfigError::Value { key: k.clone(), value: v.clone() }),
                    }
                }
                "kl_start" => t.kl_start = if v == "none" { None } else { Some(parse(k, v)?) },
                "kl_anneal_epochs" => t.kl_anneal_epochs = parse(k, v)?,
                "warm_start_epochs" => t.warm_start_epochs = parse(k, v)?,
                "prototypes" => m.prototypes = parse(k, v)?,
                "embed_dim" => m.embed_dim = parse(k, v)?,
                "sigma2" => m.sigma2 = parse(k, v)?,
                "tau" => m.tau = parse(k, v)?,
                "encoder_hidden" => m.encoder_hidden = parse(k, v)?,
                "decoder_hidden" => m.decoder_hidden = parse(k, v)?,
                "concept_hidden" => m.concept_hidden = parse(k, v)?,
                "task_hidden" => m.task_hidden = parse(k, v)?,
                "lambda_rec" => m.lambda_rec = parse(k, v)?,
                "lambda_kl" => m.lambda_kl = parse(k, v)?,
                "init_scale" => m.init_scale = parse(k, v)?,
                "data.train" => d.train = parse(k, v)?,
                "data.val" => d.val = parse(k, v)?,
                "data.test" => d.test = parse(k, v)?,
                "data.size" => d.size = parse(k, v)?,
                "data.jitter" => d.jitter = parse(k, v)?,
                "data.noise" => d.noise = parse(k, v)?,
                "data.seed" => d.seed = parse(k, v)?,
                "corruption" => self.corruption = parse(k, v)?,
                "sweep" => {
                    self.sweep = v.split(',').map(|s| parse(k, s.trim())).collect::<Result<_, _>>()?;
                }
                _ => return Err(ConfigError::UnknownKey(k.clone())),
            }
        }
        Ok(())
    }
}
