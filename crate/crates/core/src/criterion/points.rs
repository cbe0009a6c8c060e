//! Continuous point sets and bilinear point sampling.

use rand::Rng as _;

use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{kernels, Tensor};

/// Points `(x, y)` in normalized `[0, 1]²` image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub coords: Vec<(f64, f64)>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Centers of every cell of an `h×w` grid, row-major.
    pub fn grid_centers(h: usize, w: usize) -> Self {
        let mut coords = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                coords.push(((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64));
            }
        }
        Self { coords }
    }
}

fn uniform_coords(k: usize, rng: &mut Rng) -> Vec<(f64, f64)> {
    (0..k).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect()
}

pub fn sample_points_uniform(k: usize, rng: &mut Rng) -> PointSet {
    PointSet {
        coords: uniform_coords(k, rng),
    }
}

pub const OVERSAMPLE_RATIO: usize = 3;
pub const IMPORTANCE_FRACTION: f64 = 0.75;

/// PointRend-style uncertainty sampling on one `[h, w]` logit map: draw
/// `3K` uniform candidates, keep the `¾K` with the smallest `|logit|`, then
/// add `K − ¾K` fresh uniform points.
pub fn sample_points_importance(mask_logits: &Tensor, k: usize, rng: &mut Rng) -> Result<PointSet> {
    let (h, w) = match mask_logits.shape() {
        &[h, w] => (h, w),
        s => return Err(shape_err("sample_points_importance", format!("{s:?}"))),
    };
    Ok(importance_from_map(mask_logits.data(), h, w, k, rng))
}

pub(crate) fn importance_from_map(map: &[f64], h: usize, w: usize, k: usize, rng: &mut Rng) -> PointSet {
    let candidates = uniform_coords(OVERSAMPLE_RATIO * k, rng);
    let uncertainty: Vec<f64> = candidates
        .iter()
        .map(|&(x, y)| -kernels::point_value(map, &kernels::point_taps(x, y, h, w)).abs())
        .collect();
    let n_imp = (IMPORTANCE_FRACTION * k as f64) as usize;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    if n_imp > 0 && n_imp < order.len() {
        order.select_nth_unstable_by(n_imp - 1, |&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then(a.cmp(&b)));
    }
    let mut keep = order[..n_imp].to_vec();
    keep.sort_unstable();
    let mut coords: Vec<(f64, f64)> = keep.iter().map(|&i| candidates[i]).collect();
    coords.extend(uniform_coords(k - n_imp, rng));
    PointSet { coords }
}

/// Bilinear samples of an `[h, w]` map (align-corners false, border clamped).
pub fn point_sample(map: &Tensor, pts: &PointSet) -> Result<Tensor> {
    let (h, w) = match map.shape() {
        &[h, w] => (h, w),
        s => return Err(shape_err("point_sample", format!("{s:?}"))),
    };
    let data = sample_slice(map.data(), h, w, pts);
    Tensor::new(vec![pts.len()], data)
}

pub(crate) fn sample_slice(map: &[f64], h: usize, w: usize, pts: &PointSet) -> Vec<f64> {
    pts.coords
        .iter()
        .map(|&(x, y)| kernels::point_value(map, &kernels::point_taps(x, y, h, w)))
        .collect()
}

/// Samples several `[h, w]` maps at the same points, sharing the taps.
pub(crate) fn sample_maps<'a>(maps: impl IntoIterator<Item = &'a [f64]>, h: usize, w: usize, pts: &PointSet) -> Vec<Vec<f64>> {
    let taps: Vec<_> = pts.coords.iter().map(|&(x, y)| kernels::point_taps(x, y, h, w)).collect();
    maps.into_iter()
        .map(|map| taps.iter().map(|t| kernels::point_value(map, t)).collect())
        .collect()
}
