//! Independent reference implementations used by the integration tests and
//! the acceptance runner. Everything here is deliberately naive.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use m2f_core::eval::{InstanceOutput, PanopticOutput, PanopticSegment};
use m2f_core::rng::{rng_from_seed, Rng};
use m2f_core::scene::{GroundTruthScene, Mask, Segment, VOID};
use m2f_core::Tensor;
use rand::Rng as _;

pub fn rng(seed: u64) -> Rng {
    rng_from_seed(seed)
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- attention

/// Row-vector times matrix plus bias: `x [n, i] · w [i, o] + b`.
pub fn affine(x: &[f64], n: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut s = b.data()[c];
            for t in 0..i {
                s += x[r * i + t] * w.data()[t * o + c];
            }
            out[r * o + c] = s;
        }
    }
    out
}

/// Plain multi-head softmax attention on already projected `q [n, c]`,
/// `k, v [m, c]`, heads taking contiguous channel blocks.
pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, c: usize, heads: usize) -> Vec<f64> {
    let d = c / heads;
    let mut out = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|t| q[i * c + h * d + t] * k[j * c + h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                out[i * c + h * d + t] = (0..m).map(|j| e[j] / z * v[j * c + h * d + t]).sum();
            }
        }
    }
    out
}

// ---------------------------------------------------------------- hungarian

/// Minimum of `Σ cost[p(j)][j]` over injective maps from columns to rows,
/// for a row-major `rows × cols` matrix with `cols <= rows`.
pub fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn rec(cost: &[f64], rows: usize, cols: usize, j: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if j == cols {
            *best = best.min(acc);
            return;
        }
        for r in 0..rows {
            if !used[r] {
                used[r] = true;
                rec(cost, rows, cols, j + 1, used, acc + cost[r * cols + j], best);
                used[r] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, rows, cols, 0, &mut vec![false; rows], 0.0, &mut best);
    if cols == 0 {
        0.0
    } else {
        best
    }
}

// ---------------------------------------------------------------- losses

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean BCE of logits against targets over every pixel.
pub fn dense_bce(logits: &[f64], target: &[f64]) -> f64 {
    logits.iter().zip(target).map(|(&x, &t)| softplus(x) - t * x).sum::<f64>() / logits.len() as f64
}

/// `1 − (2Σσt + 1)/(Σσ + Σt + 1)` over every pixel.
pub fn dense_dice(logits: &[f64], target: &[f64]) -> f64 {
    let s: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let num = 2.0 * s.iter().zip(target).map(|(a, b)| a * b).sum::<f64>() + 1.0;
    let den = s.iter().sum::<f64>() + target.iter().sum::<f64>() + 1.0;
    1.0 - num / den
}

// ---------------------------------------------------------------- scenes

pub type PixelSet = BTreeSet<(usize, usize)>;

pub fn pixels(m: &Mask) -> PixelSet {
    let mut s = PixelSet::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                s.insert((y, x));
            }
        }
    }
    s
}

/// Random disjoint ground truth on an `h × w` grid with up to
/// `max_segments` segments, some pixels left void. Classes below
/// `things` are things.
pub fn random_gt(h: usize, w: usize, max_segments: usize, num_classes: usize, things: usize, rng: &mut Rng) -> GroundTruthScene {
    let count = rng.gen_range(1..=max_segments);
    let owner: Vec<Option<usize>> = (0..h * w)
        .map(|_| if rng.gen_bool(0.15) { None } else { Some(rng.gen_range(0..count)) })
        .collect();
    let mut segments = Vec::new();
    for s in 0..count {
        let mask = Mask::new(h, w, owner.iter().map(|&o| o == Some(s)).collect()).unwrap();
        if mask.is_empty() {
            continue;
        }
        let class = rng.gen_range(0..num_classes);
        segments.push(Segment {
            mask,
            class,
            is_thing: class < things,
        });
    }
    GroundTruthScene::new(h, w, segments).unwrap()
}

/// Random panoptic output, often derived from `gt` by perturbing pixels so
/// that true positives occur.
pub fn random_panoptic(gt: &GroundTruthScene, num_classes: usize, things: usize, rng: &mut Rng) -> PanopticOutput {
    let (h, w) = (gt.height, gt.width);
    let mut segments: Vec<PanopticSegment> = Vec::new();
    let mut ids = vec![0usize; h * w];
    // Start from the ground truth, then corrupt.
    for (j, s) in gt.segments.iter().enumerate() {
        let class = if rng.gen_bool(0.8) { s.class } else { rng.gen_range(0..num_classes) };
        segments.push(PanopticSegment {
            id: j + 1,
            class,
            is_thing: class < things,
        });
        for (o, &b) in ids.iter_mut().zip(s.mask.data()) {
            if b {
                *o = j + 1;
            }
        }
    }
    let extra = rng.gen_range(0..=2);
    for e in 0..extra {
        let class = rng.gen_range(0..num_classes);
        segments.push(PanopticSegment {
            id: gt.segments.len() + e + 1,
            class,
            is_thing: class < things,
        });
    }
    let n = segments.len();
    let flip = rng.gen_range(0.0..0.6);
    for o in ids.iter_mut() {
        if rng.gen_bool(flip) {
            *o = rng.gen_range(0..=n);
        }
    }
    // Renumber so ids are dense and every segment has pixels.
    let mut remap = vec![0usize; n + 1];
    let mut kept = Vec::new();
    for s in &segments {
        if ids.contains(&s.id) {
            kept.push(PanopticSegment {
                id: kept.len() + 1,
                ..s.clone()
            });
            remap[s.id] = kept.len();
        }
    }
    for o in ids.iter_mut() {
        *o = remap[*o];
    }
    PanopticOutput {
        height: h,
        width: w,
        ids,
        segments: kept,
    }
}

pub fn random_instances(gt: &GroundTruthScene, num_classes: usize, rng: &mut Rng) -> InstanceOutput {
    let (h, w) = (gt.height, gt.width);
    let mut instances = Vec::new();
    let count = rng.gen_range(0..=5);
    for q in 0..count {
        let mask = match gt.segments.get(rng.gen_range(0..gt.segments.len().max(1))) {
            Some(s) if rng.gen_bool(0.7) => {
                let p = rng.gen_range(0.0..0.4);
                Mask::new(h, w, s.mask.data().iter().map(|&b| if rng.gen_bool(p) { !b } else { b }).collect()).unwrap()
            }
            _ => Mask::from_fn(h, w, |_, _| rng.gen_bool(0.3)),
        };
        let class = match gt.segments.first() {
            Some(s) if rng.gen_bool(0.5) => s.class,
            _ => rng.gen_range(0..num_classes),
        };
        // Coarse scores produce ties.
        let score = (rng.gen_range(0..6) as f64) / 5.0;
        instances.push(m2f_core::eval::Instance { mask, class, score, query: q });
    }
    instances.sort_by(|a, b| b.score.total_cmp(&a.score));
    InstanceOutput { instances }
}

// ---------------------------------------------------------------- metrics

/// Panoptic quality by set arithmetic over pixel coordinates.
pub fn naive_pq(images: &[(&PanopticOutput, &GroundTruthScene)], num_classes: usize, things: usize) -> (f64, f64, f64) {
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut iou_sum = vec![0.0; num_classes];
    for (pred, gt) in images {
        let void = pixels(&gt.void_mask());
        let gsets: Vec<PixelSet> = gt.segments.iter().map(|s| pixels(&s.mask)).collect();
        let psets: Vec<PixelSet> = pred.segments.iter().map(|s| pixels(&pred.segment_mask(s.id))).collect();
        let mut gmatched = vec![false; gsets.len()];
        let mut pmatched = vec![false; psets.len()];
        for (pi, ps) in pred.segments.iter().enumerate() {
            for (gi, gs) in gt.segments.iter().enumerate() {
                if ps.class != gs.class {
                    continue;
                }
                let inter = psets[pi].intersection(&gsets[gi]).count();
                let p_no_void: PixelSet = psets[pi].difference(&void).copied().collect();
                let union = p_no_void.union(&gsets[gi]).count();
                if union > 0 && inter as f64 / union as f64 > 0.5 {
                    tp[ps.class] += 1;
                    iou_sum[ps.class] += inter as f64 / union as f64;
                    gmatched[gi] = true;
                    pmatched[pi] = true;
                }
            }
        }
        for (gi, gs) in gt.segments.iter().enumerate() {
            if !gmatched[gi] {
                fn_[gs.class] += 1;
            }
        }
        for (pi, ps) in pred.segments.iter().enumerate() {
            if pmatched[pi] || psets[pi].is_empty() {
                continue;
            }
            let on_void = psets[pi].intersection(&void).count();
            if on_void * 2 > psets[pi].len() {
                continue;
            }
            fp[ps.class] += 1;
        }
    }
    let mut all = Vec::new();
    let mut th = Vec::new();
    let mut st = Vec::new();
    for c in 0..num_classes {
        let denom = tp[c] as f64 + 0.5 * (fp[c] + fn_[c]) as f64;
        if denom == 0.0 {
            continue;
        }
        let v = iou_sum[c] / denom;
        all.push(v);
        if c < things {
            th.push(v);
        } else {
            st.push(v);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    (mean(&all), mean(&th), mean(&st))
}

/// Dataset mIoU by set arithmetic; void ground truth is ignored.
pub fn naive_miou(images: &[(&[usize], &GroundTruthScene)], num_classes: usize) -> f64 {
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (im, (pred, gt)) in images.iter().enumerate() {
        let labels = gt.label_map();
        for c in 0..num_classes {
            let g: BTreeSet<(usize, usize)> =
                (0..labels.len()).filter(|&p| labels[p] == c).map(|p| (im, p)).collect();
            let p: BTreeSet<(usize, usize)> = (0..pred.len())
                .filter(|&p| pred[p] == c && labels[p] != VOID)
                .map(|p| (im, p))
                .collect();
            inter[c] += g.intersection(&p).count();
            union[c] += g.union(&p).count();
        }
    }
    let ious: Vec<f64> = (0..num_classes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

fn set_iou(a: &PixelSet, b: &PixelSet) -> f64 {
    let u = a.union(b).count();
    if u == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / u as f64
    }
}

/// COCO-style AP: greedy matching in score order, interpolated precision
/// as the maximum precision at any recall at or above each of 101 levels.
pub fn naive_ap(images: &[(&InstanceOutput, &GroundTruthScene)], num_classes: usize, thresholds: &[f64]) -> f64 {
    let mut vals = Vec::new();
    for &thr in thresholds {
        for c in 0..num_classes {
            let n_gt: usize = images.iter().map(|(_, g)| g.segments.iter().filter(|s| s.class == c).count()).sum();
            if n_gt == 0 {
                continue;
            }
            let mut dets: Vec<(f64, usize, usize)> = Vec::new();
            for (im, (out, _)) in images.iter().enumerate() {
                for (d, inst) in out.instances.iter().enumerate().take(100) {
                    if inst.class == c {
                        dets.push((inst.score, im, d));
                    }
                }
            }
            dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut taken: BTreeSet<(usize, usize)> = BTreeSet::new();
            let mut curve = Vec::new();
            let mut hits = 0usize;
            for (rank, &(_, im, d)) in dets.iter().enumerate() {
                let (out, gt) = images[im];
                let p = pixels(&out.instances[d].mask);
                let mut best: Option<(usize, f64)> = None;
                for (j, s) in gt.segments.iter().enumerate() {
                    if s.class != c || taken.contains(&(im, j)) {
                        continue;
                    }
                    let iou = set_iou(&p, &pixels(&s.mask));
                    if iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                if let Some((j, _)) = best {
                    taken.insert((im, j));
                    hits += 1;
                }
                curve.push((hits as f64 / n_gt as f64, hits as f64 / (rank + 1) as f64));
            }
            let mut sum = 0.0;
            for r in 0..=100 {
                let level = r as f64 / 100.0;
                let best = curve
                    .iter()
                    .filter(|(rc, _)| *rc >= level)
                    .map(|&(_, p)| p)
                    .fold(0.0, f64::max);
                sum += best;
            }
            vals.push(sum / 101.0);
        }
    }
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub fn naive_ar(images: &[(&[Mask], &GroundTruthScene)], k: usize) -> f64 {
    let mut per_image = Vec::new();
    for (props, gt) in images {
        if gt.segments.is_empty() {
            continue;
        }
        let props: Vec<PixelSet> = props.iter().take(k).map(pixels).collect();
        let covered = gt
            .segments
            .iter()
            .filter(|s| {
                let g = pixels(&s.mask);
                props.iter().any(|p| set_iou(p, &g) > 0.5)
            })
            .count();
        per_image.push(covered as f64 / gt.segments.len() as f64);
    }
    if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().sum::<f64>() / per_image.len() as f64
    }
}

/// Class histogram helper for distribution checks.
pub fn histogram(values: impl IntoIterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for v in values {
        *h.entry(v).or_insert(0) += 1;
    }
    h
}

pub mod checks;
