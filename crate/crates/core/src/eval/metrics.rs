//! PQ, mIoU, COCO-style mask AP and class-agnostic AR@k.

use std::collections::HashMap;

use crate::scene::{GroundTruthScene, Mask, VOID};

use super::inference::{InstanceOutput, PanopticOutput};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PqStat {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PqReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
}

/// Per-class PQ statistics accumulated over images.
#[derive(Clone, Debug, PartialEq)]
pub struct PqAccumulator {
    pub per_class: Vec<PqStat>,
}

impl PqAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            per_class: vec![PqStat::default(); num_classes],
        }
    }

    /// Segments of equal class with IoU > 0.5 match. IoU unions leave out
    /// the prediction's pixels on ground-truth void; an unmatched prediction
    /// lying more than half on void is ignored.
    pub fn add(&mut self, pred: &PanopticOutput, gt: &GroundTruthScene) {
        let gt_labels = gt.label_map();
        let mut gt_id = vec![usize::MAX; gt.height * gt.width];
        for (j, s) in gt.segments.iter().enumerate() {
            for (o, &b) in gt_id.iter_mut().zip(s.mask.data()) {
                if b {
                    *o = j;
                }
            }
        }
        let np = pred.segments.len();
        let mut pred_area = vec![0usize; np + 1];
        let mut pred_void = vec![0usize; np + 1];
        let mut inter: HashMap<(usize, usize), usize> = HashMap::new();
        for (p, &pid) in pred.ids.iter().enumerate() {
            if pid == 0 {
                continue;
            }
            pred_area[pid] += 1;
            if gt_labels[p] == VOID {
                pred_void[pid] += 1;
            } else {
                *inter.entry((gt_id[p], pid)).or_default() += 1;
            }
        }
        let gt_area: Vec<usize> = gt.segments.iter().map(|s| s.mask.area()).collect();
        let mut gt_matched = vec![false; gt.segments.len()];
        let mut pred_matched = vec![false; np + 1];
        let mut keys: Vec<_> = inter.iter().map(|(&k, &v)| (k, v)).collect();
        keys.sort_unstable();
        for ((j, pid), i) in keys {
            let ps = &pred.segments[pid - 1];
            if ps.class != gt.segments[j].class {
                continue;
            }
            let union = pred_area[pid] + gt_area[j] - i - pred_void[pid];
            let iou = i as f64 / union as f64;
            if iou > 0.5 {
                let st = &mut self.per_class[ps.class];
                st.tp += 1;
                st.iou_sum += iou;
                gt_matched[j] = true;
                pred_matched[pid] = true;
            }
        }
        for (j, s) in gt.segments.iter().enumerate() {
            if !gt_matched[j] {
                self.per_class[s.class].fn_ += 1;
            }
        }
        for ps in &pred.segments {
            if pred_matched[ps.id] {
                continue;
            }
            if pred_void[ps.id] as f64 / pred_area[ps.id].max(1) as f64 > 0.5 {
                continue;
            }
            if pred_area[ps.id] > 0 {
                self.per_class[ps.class].fp += 1;
            }
        }
    }

    /// Averages over classes with at least one TP, FP or FN.
    pub fn report(&self, is_thing: impl Fn(usize) -> bool) -> PqReport {
        let mut all = (0.0, 0.0, 0.0, 0usize);
        let mut th = (0.0, 0usize);
        let mut st = (0.0, 0usize);
        for (c, s) in self.per_class.iter().enumerate() {
            let denom = s.tp as f64 + 0.5 * s.fp as f64 + 0.5 * s.fn_ as f64;
            if denom == 0.0 {
                continue;
            }
            let pq = s.iou_sum / denom;
            let sq = if s.tp == 0 { 0.0 } else { s.iou_sum / s.tp as f64 };
            let rq = s.tp as f64 / denom;
            all = (all.0 + pq, all.1 + sq, all.2 + rq, all.3 + 1);
            if is_thing(c) {
                th = (th.0 + pq, th.1 + 1);
            } else {
                st = (st.0 + pq, st.1 + 1);
            }
        }
        let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        PqReport {
            pq: avg(all.0, all.3),
            sq: avg(all.1, all.3),
            rq: avg(all.2, all.3),
            pq_things: avg(th.0, th.1),
            pq_stuff: avg(st.0, st.1),
        }
    }
}

/// PQ of a single image.
pub fn pq(pred: &PanopticOutput, gt: &GroundTruthScene, num_classes: usize, is_thing: impl Fn(usize) -> bool) -> PqReport {
    let mut acc = PqAccumulator::new(num_classes);
    acc.add(pred, gt);
    acc.report(is_thing)
}

/// Per-class intersections and unions accumulated over images.
#[derive(Clone, Debug, PartialEq)]
pub struct MiouAccumulator {
    pub intersection: Vec<usize>,
    pub union: Vec<usize>,
}

impl MiouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    /// Pixels whose ground truth is [`VOID`] are skipped; a [`VOID`]
    /// prediction belongs to no class.
    pub fn add(&mut self, pred: &[usize], gt: &[usize]) {
        assert_eq!(pred.len(), gt.len(), "label maps differ in size");
        for (&p, &g) in pred.iter().zip(gt) {
            if g == VOID {
                continue;
            }
            if p == g {
                self.intersection[g] += 1;
                self.union[g] += 1;
            } else {
                self.union[g] += 1;
                if p != VOID {
                    self.union[p] += 1;
                }
            }
        }
    }

    /// Mean IoU over classes present in ground truth or prediction.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self
            .intersection
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize) -> f64 {
    let mut acc = MiouAccumulator::new(num_classes);
    acc.add(pred, gt);
    acc.miou()
}

pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const RECALL_POINTS: usize = 101;
const MAX_DETECTIONS: usize = 100;

/// 101-point interpolated AP of one class at one IoU threshold; `None`
/// when the class has no ground truth.
fn ap_single(images: &[(&InstanceOutput, &GroundTruthScene)], class: usize, thr: f64) -> Option<f64> {
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    let mut n_gt = 0;
    for (im, (out, gt)) in images.iter().enumerate() {
        n_gt += gt.segments.iter().filter(|s| s.class == class).count();
        for (d, inst) in out.instances.iter().take(MAX_DETECTIONS).enumerate() {
            if inst.class == class {
                dets.push((inst.score, im, d));
            }
        }
    }
    if n_gt == 0 {
        return None;
    }
    // Stable: equal scores keep image then rank order.
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.segments.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for &(_, im, d) in &dets {
        let (out, gt) = images[im];
        let mask = &out.instances[d].mask;
        let mut best: Option<(usize, f64)> = None;
        for (j, s) in gt.segments.iter().enumerate() {
            if s.class != class || used[im][j] {
                continue;
            }
            let iou = mask.iou(&s.mask);
            if iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                used[im][j] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in &tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        precision.push(ctp as f64 / (ctp + cfp) as f64);
        recall.push(ctp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < target);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// Mean AP over classes with ground truth and the given IoU thresholds.
/// Ground truth should hold only the segments eligible for detection.
pub fn ap(images: &[(&InstanceOutput, &GroundTruthScene)], num_classes: usize, thresholds: &[f64]) -> f64 {
    let mut vals = Vec::new();
    for &t in thresholds {
        for c in 0..num_classes {
            if let Some(v) = ap_single(images, c, t) {
                vals.push(v);
            }
        }
    }
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Fraction of ground-truth masks covered at IoU > 0.5 by any of the first
/// `k` proposals, averaged over images that have ground truth.
pub fn ar_at_k(images: &[(&[Mask], &GroundTruthScene)], k: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for (props, gt) in images {
        if gt.segments.is_empty() {
            continue;
        }
        let props = &props[..k.min(props.len())];
        let hit = gt
            .segments
            .iter()
            .filter(|s| props.iter().any(|p| p.iou(&s.mask) > 0.5))
            .count();
        total += hit as f64 / gt.segments.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}
