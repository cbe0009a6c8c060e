use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TEMPERATURE: f64 = 10000.0;
const NORM_EPS: f64 = 1e-6;

/// Normalized 2-D sine/cosine embedding for an `h×w` grid, `[h·w, c]`.
///
/// The first `c/2` channels encode the row, the rest the column. Within
/// each half, channel pairs `(2i, 2i+1)` hold `sin`/`cos` of the coordinate
/// (scaled to `(0, 2π]`) divided by `10000^(2i/(c/2))`.
pub fn sinusoidal_pos_embedding(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c % 4 != 0 || c == 0 {
        return Err(Error::InvalidArgument(format!("embedding width {c} not divisible by 4")));
    }
    let half = c / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| TEMPERATURE.powf((2 * (k / 2)) as f64 / half as f64))
        .collect();
    let encode = |coord: f64, out: &mut [f64]| {
        for (k, (o, f)) in out.iter_mut().zip(&freqs).enumerate() {
            let a = coord / f;
            *o = if k % 2 == 0 { a.sin() } else { a.cos() };
        }
    };
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        let ye = (y + 1) as f64 / (h as f64 + NORM_EPS) * 2.0 * PI;
        for x in 0..w {
            let xe = (x + 1) as f64 / (w as f64 + NORM_EPS) * 2.0 * PI;
            let row = &mut data[(y * w + x) * c..(y * w + x + 1) * c];
            let (ry, rx) = row.split_at_mut(half);
            encode(ye, ry);
            encode(xe, rx);
        }
    }
    Tensor::new(vec![h * w, c], data)
}
