//! Semantic, panoptic and instance outputs from class and mask logits.

use crate::error::{shape_err, Result};
use crate::scene::{Mask, VOID};
use crate::tensor::{kernels, Tensor};

/// One segment of a panoptic output; ids start at 1, 0 marks void.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticSegment {
    pub id: usize,
    pub class: usize,
    pub is_thing: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanopticOutput {
    pub height: usize,
    pub width: usize,
    /// Segment id per pixel (row-major), 0 for void.
    pub ids: Vec<usize>,
    pub segments: Vec<PanopticSegment>,
}

impl PanopticOutput {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ids: vec![0; height * width],
            segments: Vec::new(),
        }
    }

    pub fn segment_mask(&self, id: usize) -> Mask {
        Mask::new(self.height, self.width, self.ids.iter().map(|&i| i == id).collect()).expect("shape")
    }

    /// Per-pixel class, [`VOID`] where unassigned.
    pub fn label_map(&self) -> Vec<usize> {
        self.ids
            .iter()
            .map(|&i| if i == 0 { VOID } else { self.segments[i - 1].class })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub mask: Mask,
    pub class: usize,
    pub score: f64,
    pub query: usize,
}

/// Instances sorted by descending score.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceOutput {
    pub instances: Vec<Instance>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PanopticThresholds {
    /// Minimum top class probability for a query to be kept.
    pub object_score: f64,
    /// Minimum ratio of surviving area to full binarized mask area.
    pub overlap: f64,
}

impl Default for PanopticThresholds {
    fn default() -> Self {
        Self {
            object_score: 0.8,
            overlap: 0.8,
        }
    }
}

/// Class probabilities `[N, K+1]` and mask probabilities `[N, H·W]` at the
/// requested resolution.
pub(crate) struct Probabilities {
    pub n: usize,
    pub classes: usize,
    pub class_probs: Vec<f64>,
    pub mask_probs: Vec<f64>,
}

impl Probabilities {
    pub fn new(class_logits: &Tensor, mask_logits: &Tensor, height: usize, width: usize) -> Result<Self> {
        let (n, c) = match class_logits.shape() {
            &[n, c] if c >= 1 => (n, c),
            s => return Err(shape_err("inference", format!("class logits {s:?}"))),
        };
        let (mn, h, w) = match mask_logits.shape() {
            &[a, b, c] => (a, b, c),
            s => return Err(shape_err("inference", format!("mask logits {s:?}"))),
        };
        if mn != n {
            return Err(shape_err("inference", format!("{n} class rows, {mn} masks")));
        }
        let mut class_probs = class_logits.data().to_vec();
        for row in class_probs.chunks_mut(c) {
            kernels::softmax_in_place(row)?;
        }
        let up = if (h, w) == (height, width) {
            mask_logits.data().to_vec()
        } else {
            kernels::resize_forward(mask_logits.data(), n, h, w, height, width)
        };
        let mask_probs = up.into_iter().map(kernels::sigmoid).collect();
        Ok(Self {
            n,
            classes: c - 1,
            class_probs,
            mask_probs,
        })
    }

    pub fn class_row(&self, i: usize) -> &[f64] {
        &self.class_probs[i * (self.classes + 1)..(i + 1) * (self.classes + 1)]
    }

    pub fn mask_row(&self, i: usize) -> &[f64] {
        let m = self.mask_probs.len() / self.n.max(1);
        &self.mask_probs[i * m..(i + 1) * m]
    }
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Per-pixel `argmax_c Σ_i p_i[c]·σ(m_i)` over real classes, after
/// upsampling mask logits to `height×width`.
pub fn semantic_inference(class_logits: &Tensor, mask_logits: &Tensor, height: usize, width: usize) -> Result<Vec<usize>> {
    let pr = Probabilities::new(class_logits, mask_logits, height, width)?;
    let k = pr.classes;
    let px = height * width;
    let mut score = vec![0.0; k * px];
    for i in 0..pr.n {
        let cls = pr.class_row(i);
        let m = pr.mask_row(i);
        for c in 0..k {
            let s = &mut score[c * px..(c + 1) * px];
            for (o, &mv) in s.iter_mut().zip(m) {
                *o += cls[c] * mv;
            }
        }
    }
    Ok((0..px)
        .map(|p| {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..k {
                if score[c * px + p] > best.1 {
                    best = (c, score[c * px + p]);
                }
            }
            best.0
        })
        .collect())
}

/// MaskFormer panoptic merging. `is_thing(class)` separates things from
/// stuff; stuff segments of equal class are merged.
pub fn panoptic_inference(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    height: usize,
    width: usize,
    thresholds: PanopticThresholds,
    is_thing: impl Fn(usize) -> bool,
) -> Result<PanopticOutput> {
    let pr = Probabilities::new(class_logits, mask_logits, height, width)?;
    let px = height * width;
    let mut out = PanopticOutput::empty(height, width);
    let keep: Vec<(usize, usize, f64)> = (0..pr.n)
        .filter_map(|i| {
            let (label, score) = argmax(pr.class_row(i));
            (label != pr.classes && score > thresholds.object_score).then_some((i, label, score))
        })
        .collect();
    if keep.is_empty() {
        return Ok(out);
    }
    // Pixel owner among kept queries.
    let owner: Vec<usize> = (0..px)
        .map(|p| {
            let mut best = (0, f64::NEG_INFINITY);
            for (k, &(i, _, s)) in keep.iter().enumerate() {
                let v = s * pr.mask_row(i)[p];
                if v > best.1 {
                    best = (k, v);
                }
            }
            best.0
        })
        .collect();
    let mut stuff_ids: Vec<(usize, usize)> = Vec::new();
    for (k, &(i, class, _)) in keep.iter().enumerate() {
        let m = pr.mask_row(i);
        let mask_area = owner.iter().filter(|&&o| o == k).count();
        let original_area = m.iter().filter(|&&v| v >= 0.5).count();
        let pixels: Vec<usize> = (0..px).filter(|&p| owner[p] == k && m[p] >= 0.5).collect();
        if mask_area == 0 || original_area == 0 || pixels.is_empty() {
            continue;
        }
        if (mask_area as f64) / (original_area as f64) < thresholds.overlap {
            continue;
        }
        let thing = is_thing(class);
        let id = match stuff_ids.iter().find(|&&(c, _)| !thing && c == class) {
            Some(&(_, id)) => id,
            None => {
                out.segments.push(PanopticSegment {
                    id: out.segments.len() + 1,
                    class,
                    is_thing: thing,
                });
                let id = out.segments.len();
                if !thing {
                    stuff_ids.push((class, id));
                }
                id
            }
        };
        for p in pixels {
            out.ids[p] = id;
        }
    }
    Ok(out)
}

/// Scores every `(query, class)` pair with `class_allowed(class)` as
/// `p_i[c] × mean(σ(m_i) | σ(m_i) > 0.5)` and keeps the best `top_k`.
/// Ties keep query order, then class order.
pub fn instance_inference(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    height: usize,
    width: usize,
    top_k: usize,
    class_allowed: impl Fn(usize) -> bool,
) -> Result<InstanceOutput> {
    let pr = Probabilities::new(class_logits, mask_logits, height, width)?;
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    let mut mask_scores = Vec::with_capacity(pr.n);
    for i in 0..pr.n {
        let m = pr.mask_row(i);
        let (sum, cnt) = m
            .iter()
            .filter(|&&v| v > 0.5)
            .fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
        let ms = if cnt == 0 { 0.0 } else { sum / cnt as f64 };
        mask_scores.push(ms);
        let cls = pr.class_row(i);
        for c in (0..pr.classes).filter(|&c| class_allowed(c)) {
            cands.push((cls[c] * ms, i, c));
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands.truncate(top_k);
    let instances = cands
        .into_iter()
        .map(|(score, i, c)| Instance {
            mask: Mask::new(height, width, pr.mask_row(i).iter().map(|&v| v > 0.5).collect()).expect("shape"),
            class: c,
            score,
            query: i,
        })
        .collect();
    Ok(InstanceOutput { instances })
}

/// Class-agnostic proposals ranked by `max_c p_i[c] × mask score`.
pub fn proposal_masks(class_logits: &Tensor, mask_logits: &Tensor, height: usize, width: usize, top_k: usize) -> Result<Vec<Mask>> {
    let pr = Probabilities::new(class_logits, mask_logits, height, width)?;
    let mut scored: Vec<(f64, usize)> = (0..pr.n)
        .map(|i| {
            let m = pr.mask_row(i);
            let (sum, cnt) = m.iter().filter(|&&v| v > 0.5).fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
            let ms = if cnt == 0 { 0.0 } else { sum / cnt as f64 };
            let (_, p) = argmax(&pr.class_row(i)[..pr.classes]);
            (p * ms, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(top_k);
    Ok(scored
        .into_iter()
        .map(|(_, i)| Mask::new(height, width, pr.mask_row(i).iter().map(|&v| v > 0.5).collect()).expect("shape"))
        .collect())
}
