use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Cross-attention variant used by every decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Attention restricted to the previous prediction's foreground.
    Masked,
    /// Standard cross-attention over all positions.
    Cross,
}

/// Which pyramid level(s) the decoder layers consume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    /// Round-robin over 1/32, 1/16, 1/8.
    Multi,
    /// Every layer uses the given level (0 = 1/32, 1 = 1/16, 2 = 1/8).
    Single(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryInit {
    /// Learnable `X₀`, supervised through the layer-0 prediction.
    LearnableSupervised,
    /// Learnable `X₀` without layer-0 loss.
    LearnableUnsupervised,
    /// `X₀ = 0`, not learnable, no layer-0 loss.
    ZeroInit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerOrder {
    /// Masked attention, self-attention, FFN.
    MaskedFirst,
    /// Self-attention, masked attention, FFN.
    SelfFirst,
}

macro_rules! keyword_enum {
    ($ty:ty { $($variant:pat => $text:literal),* $(,)? } parse { $($ptext:literal => $pval:expr),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),* })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($ptext => Ok($pval),)*
                    _ => Err(Error::Config(format!("unknown {} value {s:?}", stringify!($ty)))),
                }
            }
        }
    };
}

keyword_enum!(AttentionMode { AttentionMode::Masked => "masked", AttentionMode::Cross => "cross" }
    parse { "masked" => AttentionMode::Masked, "cross" => AttentionMode::Cross });
keyword_enum!(ScaleMode {
        ScaleMode::Multi => "multi",
        ScaleMode::Single(0) => "single-1/32",
        ScaleMode::Single(1) => "single-1/16",
        ScaleMode::Single(_) => "single-1/8",
    }
    parse {
        "multi" => ScaleMode::Multi,
        "single-1/32" => ScaleMode::Single(0),
        "single-1/16" => ScaleMode::Single(1),
        "single-1/8" => ScaleMode::Single(2),
    });
keyword_enum!(QueryInit {
        QueryInit::LearnableSupervised => "learnable-supervised",
        QueryInit::LearnableUnsupervised => "learnable-unsupervised",
        QueryInit::ZeroInit => "zero-init",
    }
    parse {
        "learnable-supervised" => QueryInit::LearnableSupervised,
        "learnable-unsupervised" => QueryInit::LearnableUnsupervised,
        "zero-init" => QueryInit::ZeroInit,
    });
keyword_enum!(LayerOrder { LayerOrder::MaskedFirst => "MA-SA-FFN", LayerOrder::SelfFirst => "SA-MA-FFN" }
    parse { "MA-SA-FFN" => LayerOrder::MaskedFirst, "SA-MA-FFN" => LayerOrder::SelfFirst });

impl QueryInit {
    /// Whether the layer-0 prediction contributes to the loss.
    pub fn supervised(self) -> bool {
        self == QueryInit::LearnableSupervised
    }
}

/// Number of pyramid levels the decoder cycles through.
pub const NUM_SCALES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Embedding width `C`.
    pub hidden_dim: usize,
    /// Query count `N`.
    pub num_queries: usize,
    /// Round-robin repeats `L`; the decoder has `3L` layers.
    pub rounds: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Semantic classes (things first, then stuff), excluding "no object".
    pub num_classes: usize,
    /// Classes `0..thing_classes` are things.
    pub thing_classes: usize,
    pub mask_threshold: f64,
    /// Channel widths of the four backbone stages (strides 4, 8, 16, 32).
    pub backbone_widths: [usize; 4],
    pub attention: AttentionMode,
    pub scales: ScaleMode,
    pub queries: QueryInit,
    pub layer_order: LayerOrder,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_queries: 20,
            rounds: 3,
            heads: 8,
            ffn_dim: 256,
            num_classes: 6,
            thing_classes: 4,
            mask_threshold: 0.5,
            backbone_widths: [32, 64, 128, 128],
            attention: AttentionMode::Masked,
            scales: ScaleMode::Multi,
            queries: QueryInit::LearnableSupervised,
            layer_order: LayerOrder::MaskedFirst,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn num_layers(&self) -> usize {
        NUM_SCALES * self.rounds
    }

    /// Prediction sets emitted per forward pass (layer 0 plus every layer).
    pub fn num_predictions(&self) -> usize {
        self.num_layers() + 1
    }

    pub fn no_object_class(&self) -> usize {
        self.num_classes
    }

    pub fn is_thing(&self, class: usize) -> bool {
        class < self.thing_classes
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.rounds == 0 || self.num_queries == 0 {
            return fail("rounds and num_queries must be positive".into());
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return fail(format!("hidden_dim {} not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if self.hidden_dim % 4 != 0 {
            return fail(format!("hidden_dim {} not divisible by 4", self.hidden_dim));
        }
        if self.num_classes == 0 || self.thing_classes > self.num_classes {
            return fail("need num_classes >= thing_classes and num_classes >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.backbone_widths.contains(&0) || self.ffn_dim == 0 {
            return fail("widths must be positive".into());
        }
        Ok(())
    }

    /// Ordered `key = value` entries, the inverse of [`ModelConfig::set`].
    pub fn entries(&self) -> Vec<(String, String)> {
        let w = self.backbone_widths;
        [
            ("hidden_dim", self.hidden_dim.to_string()),
            ("num_queries", self.num_queries.to_string()),
            ("rounds", self.rounds.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("thing_classes", self.thing_classes.to_string()),
            ("mask_threshold", self.mask_threshold.to_string()),
            ("backbone_widths", format!("{},{},{},{}", w[0], w[1], w[2], w[3])),
            ("attention", self.attention.to_string()),
            ("scales", self.scales.to_string()),
            ("queries", self.queries.to_string()),
            ("layer_order", self.layer_order.to_string()),
            ("dropout", self.dropout.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "num_queries" => self.num_queries = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "thing_classes" => self.thing_classes = parse(key, value)?,
            "mask_threshold" => self.mask_threshold = parse(key, value)?,
            "backbone_widths" => {
                let parts = value
                    .split(',')
                    .map(|p| parse::<usize>(key, p.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.backbone_widths = parts
                    .try_into()
                    .map_err(|_| Error::Config("backbone_widths needs four values".into()))?;
            }
            "attention" => self.attention = value.parse()?,
            "scales" => self.scales = value.parse()?,
            "queries" => self.queries = value.parse()?,
            "layer_order" => self.layer_order = value.parse()?,
            "dropout" => self.dropout = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_decoder_recipe() {
        let c = ModelConfig::default();
        assert_eq!(c.num_layers(), 9);
        assert_eq!(c.num_predictions(), 10);
        assert_eq!(c.mask_threshold, 0.5);
        assert_eq!(c.hidden_dim % c.heads, 0);
        c.validate().unwrap();
    }

    #[test]
    fn entries_round_trip() {
        let mut c = ModelConfig {
            attention: AttentionMode::Cross,
            scales: ScaleMode::Single(1),
            queries: QueryInit::ZeroInit,
            layer_order: LayerOrder::SelfFirst,
            dropout: 0.1,
            ..Default::default()
        };
        c.backbone_widths = [8, 16, 24, 32];
        let e = c.entries();
        let back = ModelConfig::from_entries(e.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ModelConfig::default();
        assert!(c.set("attention", "sideways").is_err());
        assert!(!c.set("unknown", "1").unwrap());
        c.heads = 7;
        assert!(c.validate().is_err());
    }
}
