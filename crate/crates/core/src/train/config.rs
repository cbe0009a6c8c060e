//! Training configuration and its flat `key = value` text form.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys are the model keys of [`ModelConfig`] plus the training keys listed
//! in [`TrainConfig::entries`].

use std::fs;
use std::path::Path;

use crate::criterion::{LossConfig, PointMode};
use crate::error::{Error, Result};
use crate::model::config::parse;
use crate::model::{ModelConfig, QueryInit};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub backbone_lr_multiplier: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    /// Fractions of `steps` at which the learning rate is divided by
    /// `decay_factor`.
    pub decay_points: Vec<f64>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            lr: 1e-4,
            weight_decay: 0.05,
            backbone_lr_multiplier: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 5000,
            decay_points: vec![0.9, 0.95],
            decay_factor: 10.0,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !self.decay_points.iter().all(|&f| f > 0.0 && f < 1.0) {
            return Err(Error::Config("decay points must lie in (0, 1)".into()));
        }
        if self.decay_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay points must be increasing".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.loss.num_points == 0 {
            return Err(Error::Config("num_points must be positive".into()));
        }
        if !(self.lr > 0.0 && self.decay_factor > 0.0) {
            return Err(Error::Config("lr and decay_factor must be positive".into()));
        }
        Ok(())
    }

    /// The loss configuration as used for this model (prediction set 0 is
    /// only supervised for supervised learnable queries).
    pub fn effective_loss(&self) -> LossConfig {
        LossConfig {
            supervise_initial: self.model.queries == QueryInit::LearnableSupervised,
            ..self.loss
        }
    }

    /// Ordered entries; model keys first.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = self.model.entries();
        let w = &self.loss.weights;
        let decay = self.decay_points.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        out.extend(
            [
                ("lambda_ce", w.ce.to_string()),
                ("lambda_dice", w.dice.to_string()),
                ("lambda_cls", w.cls.to_string()),
                ("no_object_weight", w.no_object.to_string()),
                ("num_points", self.loss.num_points.to_string()),
                ("loss_points", self.loss.points.to_string()),
                ("lr", self.lr.to_string()),
                ("weight_decay", self.weight_decay.to_string()),
                ("backbone_lr_multiplier", self.backbone_lr_multiplier.to_string()),
                ("beta1", self.beta1.to_string()),
                ("beta2", self.beta2.to_string()),
                ("eps", self.eps.to_string()),
                ("steps", self.steps.to_string()),
                ("decay_points", decay),
                ("decay_factor", self.decay_factor.to_string()),
                ("batch_size", self.batch_size.to_string()),
                ("seed", self.seed.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
        );
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let w = &mut self.loss.weights;
        match key {
            "lambda_ce" => w.ce = parse(key, value)?,
            "lambda_dice" => w.dice = parse(key, value)?,
            "lambda_cls" => w.cls = parse(key, value)?,
            "no_object_weight" => w.no_object = parse(key, value)?,
            "num_points" => self.loss.num_points = parse(key, value)?,
            "loss_points" => self.loss.points = value.trim().parse::<PointMode>()?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "backbone_lr_multiplier" => self.backbone_lr_multiplier = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "decay_points" => {
                self.decay_points = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse(key, v)).collect::<Result<_>>()?
                }
            }
            "decay_factor" => self.decay_factor = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `KEY=VALUE` overrides such as `attention=cross`.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {kv:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_text(&fs::read_to_string(path)?)
    }
}

/// Parses the flat `key = value` grammar into ordered pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
