//! One text record per training step:
//!
//! ```text
//! step=<n> lr=<f64> loss=<f64> layers=<cls>,<ce>,<dice>;<cls>,<ce>,<dice>;...
//! ```
//!
//! Unsupervised prediction sets are written as `-`. Floats use Rust's
//! shortest round-trip formatting.

use std::fmt;
use std::str::FromStr;

use crate::criterion::LayerLoss;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    /// Batch-mean total loss.
    pub loss: f64,
    /// Batch-mean unweighted terms per prediction set.
    pub layers: Vec<Option<LayerLoss>>,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} lr={} loss={} layers=", self.step, self.lr, self.loss)?;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            match l {
                Some(l) => write!(f, "{},{},{}", l.cls, l.ce, l.dice)?,
                None => f.write_str("-")?,
            }
        }
        Ok(())
    }
}

fn bad(line: &str) -> Error {
    Error::Corrupt(format!("malformed log record {line:?}"))
}

impl FromStr for LogRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut fields = line.split(' ');
        let mut next = |key: &str| -> Result<&str> {
            fields
                .next()
                .and_then(|f| f.strip_prefix(key))
                .and_then(|f| f.strip_prefix('='))
                .ok_or_else(|| bad(line))
        };
        let step = next("step")?.parse().map_err(|_| bad(line))?;
        let lr = next("lr")?.parse().map_err(|_| bad(line))?;
        let loss = next("loss")?.parse().map_err(|_| bad(line))?;
        let layers_txt = next("layers")?;
        let layers = if layers_txt.is_empty() {
            Vec::new()
        } else {
            layers_txt
                .split(';')
                .map(|part| {
                    if part == "-" {
                        return Ok(None);
                    }
                    let v: Vec<f64> = part
                        .split(',')
                        .map(|x| x.parse().map_err(|_| bad(line)))
                        .collect::<Result<_>>()?;
                    match v[..] {
                        [cls, ce, dice] => Ok(Some(LayerLoss { cls, ce, dice })),
                        _ => Err(bad(line)),
                    }
                })
                .collect::<Result<_>>()?
        };
        Ok(Self { step, lr, loss, layers })
    }
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(str::parse).collect()
}
