//! FPN pixel decoder: lateral 1×1 projections, top-down 2× upsampling and
//! 3×3 smoothing, ending in the stride-4 per-pixel embedding.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

use super::layers::Conv;
use super::params::{BoundParams, ParamGroup, ParamStore};

/// Multi-scale decoder input plus the per-pixel embedding map.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// `[C, h, w]` maps ordered 1/32, 1/16, 1/8.
    pub scales: [Var; 3],
    /// `[C, H/4, W/4]`.
    pub per_pixel: Var,
}

#[derive(Clone, Debug)]
pub struct PixelDecoder {
    /// 1×1 projections of res2, res3, res4.
    lateral: [Conv; 3],
    /// 3×3 smoothing at 1/4, 1/8, 1/16, and the res5 input conv at 1/32.
    output: [Conv; 4],
    mask_features: Conv,
}

impl PixelDecoder {
    pub fn new(store: &mut ParamStore, widths: [usize; 4], c: usize, rng: &mut Rng) -> Self {
        let g = ParamGroup::Head;
        let lateral = std::array::from_fn(|i| Conv::new(store, &format!("pixel.lateral{}", i + 2), widths[i], c, 1, 1, g, rng));
        let output = std::array::from_fn(|i| {
            let cin = if i == 3 { widths[3] } else { c };
            Conv::new(store, &format!("pixel.output{}", i + 2), cin, c, 3, 1, g, rng)
        });
        let mask_features = Conv::new(store, "pixel.mask_features", c, c, 1, 1, g, rng);
        Self {
            lateral,
            output,
            mask_features,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, feats: &[Var; 4]) -> Result<FeaturePyramid> {
        let y = self.output[3].apply(tape, p, feats[3])?;
        let mut y = tape.relu(y)?;
        let mut outs = vec![y];
        for level in (0..3).rev() {
            let lat = self.lateral[level].apply(tape, p, feats[level])?;
            let (h, w) = {
                let s = tape.shape(lat);
                (s[1], s[2])
            };
            let up = tape.resize(y, h, w)?;
            let sum = tape.add(lat, up)?;
            let smooth = self.output[level].apply(tape, p, sum)?;
            y = tape.relu(smooth)?;
            outs.push(y);
        }
        let per_pixel = self.mask_features.apply(tape, p, outs[3])?;
        Ok(FeaturePyramid {
            scales: [outs[0], outs[1], outs[2]],
            per_pixel,
        })
    }
}
