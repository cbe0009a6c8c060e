//! Small strided CNN producing features at strides 4, 8, 16 and 32.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

use super::layers::Conv;
use super::params::{BoundParams, ParamGroup, ParamStore};

/// Input height and width must be multiples of this.
pub const BACKBONE_STRIDE: usize = 32;

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv,
    stages: [Conv; 4],
}

impl Backbone {
    pub fn new(store: &mut ParamStore, widths: [usize; 4], rng: &mut Rng) -> Self {
        let g = ParamGroup::Backbone;
        let stem = Conv::new(store, "backbone.stem", 3, widths[0], 3, 2, g, rng);
        let ins = [widths[0], widths[0], widths[1], widths[2]];
        let stages = std::array::from_fn(|i| {
            Conv::new(store, &format!("backbone.stage{}", i + 1), ins[i], widths[i], 3, 2, g, rng)
        });
        Self { stem, stages }
    }

    /// Returns `[res2, res3, res4, res5]` (strides 4, 8, 16, 32).
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, image: Var) -> Result<[Var; 4]> {
        match tape.shape(image) {
            &[3, h, w] if h % BACKBONE_STRIDE == 0 && w % BACKBONE_STRIDE == 0 && h > 0 && w > 0 => {}
            s => {
                return Err(Error::InvalidArgument(format!(
                    "backbone input must be [3, H, W] with H, W multiples of {BACKBONE_STRIDE}, got {s:?}"
                )))
            }
        }
        let x = self.stem.apply(tape, p, image)?;
        let mut x = tape.relu(x)?;
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            let y = stage.apply(tape, p, x)?;
            x = tape.relu(y)?;
            out.push(x);
        }
        Ok(out.try_into().expect("four stages"))
    }
}

/// Convenience for callers holding a plain image tensor.
pub fn backbone_forward(backbone: &Backbone, tape: &mut Tape, p: &BoundParams, image: &Tensor) -> Result<[Var; 4]> {
    let x = tape.constant(image.clone())?;
    backbone.forward(tape, p, x)
}
