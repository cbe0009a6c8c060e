use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

use super::layers::Linear;
use super::params::{BoundParams, ParamGroup, ParamStore};

/// Class logits and mask logits for every query at one decoder stage.
#[derive(Clone, Copy, Debug)]
pub struct SegmentPrediction {
    /// `[N, K_cls + 1]`, last column is "no object".
    pub class_logits: Var,
    /// `[N, H/4, W/4]`.
    pub mask_logits: Var,
}

/// Linear classifier plus a 3-layer mask-embedding MLP.
#[derive(Clone, Debug)]
pub struct PredictionHeads {
    class_embed: Linear,
    mask_embed: [Linear; 3],
}

impl PredictionHeads {
    pub fn new(store: &mut ParamStore, c: usize, num_classes: usize, rng: &mut Rng) -> Self {
        let g = ParamGroup::Head;
        let class_embed = Linear::new(store, "heads.class", c, num_classes + 1, g, rng);
        let mask_embed = std::array::from_fn(|i| Linear::new(store, &format!("heads.mask{i}"), c, c, g, rng));
        Self {
            class_embed,
            mask_embed,
        }
    }

    /// Mask embeddings `[N, C]`.
    pub fn mask_embedding(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.mask_embed.iter().enumerate() {
            h = layer.apply(tape, p, h)?;
            if i + 1 < self.mask_embed.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn predict(&self, tape: &mut Tape, p: &BoundParams, x: Var, per_pixel: Var) -> Result<SegmentPrediction> {
        let class_logits = self.class_embed.apply(tape, p, x)?;
        let embed = self.mask_embedding(tape, p, x)?;
        let mask_logits = mask_logits_from_embedding(tape, embed, per_pixel)?;
        Ok(SegmentPrediction {
            class_logits,
            mask_logits,
        })
    }
}

/// `mask[i, y, x] = ⟨embed[i], per_pixel[:, y, x]⟩`.
pub fn mask_logits_from_embedding(tape: &mut Tape, embed: Var, per_pixel: Var) -> Result<Var> {
    let (c, h, w) = match tape.shape(per_pixel) {
        &[c, h, w] => (c, h, w),
        s => return Err(shape_err("mask_logits", format!("per-pixel map {s:?}"))),
    };
    let n = tape.shape(embed)[0];
    let flat = tape.reshape(per_pixel, &[c, h * w])?;
    let logits = tape.matmul(embed, flat)?;
    tape.reshape(logits, &[n, h, w])
}
