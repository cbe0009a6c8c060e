//! Mask overlays written as binary PPM (P6) images.

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Result};
use crate::eval::{InstanceOutput, PanopticOutput};
use crate::scene::VOID;
use crate::tensor::Tensor;

/// Weight of the overlay color in the blend.
pub const ALPHA: f64 = 0.5;

/// What to draw on top of the image.
#[derive(Clone, Copy, Debug)]
pub enum Overlay<'a> {
    /// Colored by segment id.
    Panoptic(&'a PanopticOutput),
    /// Colored by rank; higher-scoring instances are drawn last.
    Instances(&'a InstanceOutput),
    /// Per-pixel class labels, [`VOID`] left untinted.
    Labels(&'a [usize]),
}

/// Deterministic color for a segment id or class.
pub fn palette(key: u64) -> [u8; 3] {
    let mut z = key.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    // Keep every channel away from black so overlays stay visible.
    [0, 8, 16].map(|s| 64 + ((z >> s) & 0xff) as u8 % 192)
}

/// Renders `image` (`[3, H, W]`, values in `[0, 1]`) with `overlay` blended
/// on top and returns the PPM bytes.
pub fn render_masks(image: &Tensor, overlay: Overlay<'_>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(shape_err("render_masks", format!("image must be [3,H,W], got {:?}", image.shape())));
    };
    let hw = h * w;
    let mut tint: Vec<Option<u64>> = vec![None; hw];
    match overlay {
        Overlay::Panoptic(p) => {
            check(p.height, p.width, h, w)?;
            for (t, &id) in tint.iter_mut().zip(&p.ids) {
                if id != 0 {
                    *t = Some(id as u64);
                }
            }
        }
        Overlay::Instances(inst) => {
            for (rank, i) in inst.instances.iter().enumerate().rev() {
                check(i.mask.height(), i.mask.width(), h, w)?;
                for (t, &m) in tint.iter_mut().zip(i.mask.data()) {
                    if m {
                        *t = Some(rank as u64 + 1);
                    }
                }
            }
        }
        Overlay::Labels(labels) => {
            if labels.len() != hw {
                return Err(shape_err("render_masks", format!("{} labels for a {h}x{w} image", labels.len())));
            }
            for (t, &c) in tint.iter_mut().zip(labels) {
                if c != VOID {
                    *t = Some(c as u64);
                }
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * hw);
    let d = image.data();
    for (i, t) in tint.iter().enumerate() {
        let color = t.map(palette);
        for c in 0..3 {
            let mut v = d[c * hw + i].clamp(0.0, 1.0) * 255.0;
            if let Some(col) = color {
                v = (1.0 - ALPHA) * v + ALPHA * col[c] as f64;
            }
            out.push(v.round() as u8);
        }
    }
    Ok(out)
}

pub fn write_render(path: impl AsRef<Path>, image: &Tensor, overlay: Overlay<'_>) -> Result<()> {
    fs::write(path, render_masks(image, overlay)?)?;
    Ok(())
}

fn check(mh: usize, mw: usize, h: usize, w: usize) -> Result<()> {
    if (mh, mw) != (h, w) {
        return Err(shape_err("render_masks", format!("overlay is {mh}x{mw}, image is {h}x{w}")));
    }
    Ok(())
}
