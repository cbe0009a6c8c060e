//! Binary masks and panoptic ground truth.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Label used for pixels that belong to no segment.
pub const VOID: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err("mask", format!("{} values for {height}×{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count()
    }

    pub fn union(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a || b).count()
    }

    /// Intersection over union; two empty masks give 0.
    pub fn iou(&self, other: &Mask) -> f64 {
        let u = self.union(other);
        if u == 0 {
            0.0
        } else {
            self.intersection(other) as f64 / u as f64
        }
    }

    /// `[H, W]` map of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.height, self.width], data).expect("mask shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub mask: Mask,
    pub class: usize,
    pub is_thing: bool,
}

/// Ground-truth segments of one image; panoptic segments are disjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthScene {
    pub height: usize,
    pub width: usize,
    pub segments: Vec<Segment>,
}

impl GroundTruthScene {
    pub fn new(height: usize, width: usize, segments: Vec<Segment>) -> Result<Self> {
        if let Some(s) = segments.iter().find(|s| s.mask.height != height || s.mask.width != width) {
            return Err(shape_err(
                "ground truth",
                format!("segment mask {}×{} in {height}×{width} scene", s.mask.height, s.mask.width),
            ));
        }
        Ok(Self {
            height,
            width,
            segments,
        })
    }

    /// Pixels covered by no segment.
    pub fn void_mask(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| !self.segments.iter().any(|s| s.mask.get(y, x)))
    }

    /// Per-pixel class, [`VOID`] where uncovered.
    pub fn label_map(&self) -> Vec<usize> {
        let mut out = vec![VOID; self.height * self.width];
        for s in &self.segments {
            for (o, &b) in out.iter_mut().zip(s.mask.data()) {
                if b {
                    *o = s.class;
                }
            }
        }
        out
    }

    pub fn things(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.is_thing)
    }

    /// Instance ground truth: thing segments only.
    pub fn instance_view(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            segments: self.things().cloned().collect(),
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = vec![false; self.height * self.width];
        for s in &self.segments {
            for (v, &b) in seen.iter_mut().zip(s.mask.data()) {
                if b && *v {
                    return false;
                }
                *v |= b;
            }
        }
        true
    }
}

/// Image plus ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`.
    pub image: Tensor,
    pub truth: GroundTruthScene,
}
