//! Inference post-processing, metrics, evaluation drivers and attention
//! analyses.

pub mod inference;
pub mod metrics;

pub use inference::{
    instance_inference, panoptic_inference, proposal_masks, semantic_inference, Instance, InstanceOutput,
    PanopticOutput, PanopticSegment, PanopticThresholds,
};
pub use metrics::{ap, ar_at_k, miou, pq, MiouAccumulator, PqAccumulator, PqReport, PqStat, COCO_IOU_THRESHOLDS};

use std::fmt;
use std::str::FromStr;

use crate::criterion::{hungarian, matching_cost, LossWeights, PointSet};
use crate::error::{Error, Result};
use crate::model::{Mask2Former, ModelConfig, NUM_SCALES};
use crate::scene::{GroundTruthScene, Mask, Scene};
use crate::tensor::{kernels, Tensor};

/// Instances kept per image for AP.
pub const INSTANCE_TOP_K: usize = 100;
/// Proposals kept per image for AR.
pub const PROPOSAL_TOP_K: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Panoptic,
    Instance,
    Semantic,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Panoptic => "panoptic",
            Task::Instance => "instance",
            Task::Semantic => "semantic",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "panoptic" => Ok(Task::Panoptic),
            "instance" => Ok(Task::Instance),
            "semantic" => Ok(Task::Semantic),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

/// Metric results; fields not produced by the task are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    pub pq: Option<PqReport>,
    pub ap: Option<f64>,
    pub miou: Option<f64>,
}

impl EvalReport {
    /// `key = value` lines, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = format!("images = {}\n", self.images);
        if let Some(p) = &self.pq {
            out += &format!(
                "pq = {}\nsq = {}\nrq = {}\npq_things = {}\npq_stuff = {}\n",
                p.pq, p.sq, p.rq, p.pq_things, p.pq_stuff
            );
        }
        if let Some(a) = self.ap {
            out += &format!("ap = {a}\n");
        }
        if let Some(m) = self.miou {
            out += &format!("miou = {m}\n");
        }
        out
    }

    /// Whitespace-separated table: `metric value` rows, values in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::from("metric      value\n");
        let mut row = |k: &str, v: f64| out += &format!("{k:<11} {:.2}\n", 100.0 * v);
        if let Some(p) = &self.pq {
            row("PQ", p.pq);
            row("SQ", p.sq);
            row("RQ", p.rq);
            row("PQ_th", p.pq_things);
            row("PQ_st", p.pq_stuff);
        }
        if let Some(a) = self.ap {
            row("AP", a);
        }
        if let Some(m) = self.miou {
            row("mIoU", m);
        }
        out
    }
}

/// Final-layer class and mask logits for one image.
pub type Prediction = (Tensor, Tensor);

/// Final-layer predictions for every scene, computed in parallel over
/// contiguous chunks and returned in scene order.
pub fn predict_all(model: &Mask2Former, scenes: &[Scene]) -> Result<Vec<Prediction>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(scenes.len().max(1));
    if workers <= 1 {
        return scenes.iter().map(|s| model.predict(&s.image)).collect();
    }
    let chunk = scenes.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| model.predict(&s.image)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(scenes.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

/// Rejects ground truth whose classes the model cannot represent.
pub fn check_compatible(cfg: &ModelConfig, scenes: &[Scene]) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        for seg in &s.truth.segments {
            if seg.class >= cfg.num_classes || seg.is_thing != cfg.is_thing(seg.class) {
                return Err(Error::Config(format!(
                    "scene {i} has class {} (thing: {}) but the model has {} classes, {} of them things",
                    seg.class, seg.is_thing, cfg.num_classes, cfg.thing_classes
                )));
            }
        }
    }
    Ok(())
}

/// Runs the task's inference path and metrics on precomputed predictions.
/// Panoptic reports PQ plus thing AP and mIoU from the same predictions.
pub fn evaluate_predictions(preds: &[Prediction], scenes: &[Scene], task: Task, cfg: &ModelConfig) -> Result<EvalReport> {
    if preds.len() != scenes.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} scenes", preds.len(), scenes.len())));
    }
    check_compatible(cfg, scenes)?;
    let k = cfg.num_classes;
    let is_thing = |c: usize| cfg.is_thing(c);
    let mut report = EvalReport {
        images: scenes.len(),
        ..EvalReport::default()
    };
    if task == Task::Panoptic {
        let mut acc = PqAccumulator::new(k);
        for ((cl, ml), s) in preds.iter().zip(scenes) {
            let gt = &s.truth;
            let out = panoptic_inference(cl, ml, gt.height, gt.width, PanopticThresholds::default(), is_thing)?;
            acc.add(&out, gt);
        }
        report.pq = Some(acc.report(is_thing));
    }
    if matches!(task, Task::Panoptic | Task::Instance) {
        let mut outs = Vec::with_capacity(scenes.len());
        let mut gts = Vec::with_capacity(scenes.len());
        for ((cl, ml), s) in preds.iter().zip(scenes) {
            let gt = &s.truth;
            outs.push(instance_inference(cl, ml, gt.height, gt.width, INSTANCE_TOP_K, is_thing)?);
            gts.push(gt.instance_view());
        }
        let pairs: Vec<_> = outs.iter().zip(&gts).collect();
        report.ap = Some(ap(&pairs, k, &COCO_IOU_THRESHOLDS));
    }
    if matches!(task, Task::Panoptic | Task::Semantic) {
        let mut acc = MiouAccumulator::new(k);
        for ((cl, ml), s) in preds.iter().zip(scenes) {
            let gt = &s.truth;
            let labels = semantic_inference(cl, ml, gt.height, gt.width)?;
            acc.add(&labels, &gt.label_map());
        }
        report.miou = Some(acc.miou());
    }
    Ok(report)
}

pub fn evaluate(model: &Mask2Former, scenes: &[Scene], task: Task) -> Result<EvalReport> {
    check_compatible(model.config(), scenes)?;
    let preds = predict_all(model, scenes)?;
    evaluate_predictions(&preds, scenes, task, model.config())
}

/// Class and mask logits of every prediction set for one image.
fn all_prediction_sets(model: &Mask2Former, image: &Tensor) -> Result<Vec<Prediction>> {
    let (tape, out) = model.infer(image)?;
    Ok(out
        .predictions
        .iter()
        .map(|p| (tape.value(p.class_logits).clone(), tape.value(p.mask_logits).clone()))
        .collect())
}

/// Panoptic quality of each of the `3L + 1` prediction sets.
pub fn per_layer_pq(model: &Mask2Former, scenes: &[Scene]) -> Result<Vec<PqReport>> {
    let cfg = model.config();
    let is_thing = |c: usize| cfg.is_thing(c);
    let mut accs = vec![PqAccumulator::new(cfg.num_classes); cfg.num_predictions()];
    for s in scenes {
        let gt = &s.truth;
        for (acc, (cl, ml)) in accs.iter_mut().zip(all_prediction_sets(model, &s.image)?) {
            let out = panoptic_inference(&cl, &ml, gt.height, gt.width, PanopticThresholds::default(), is_thing)?;
            acc.add(&out, gt);
        }
    }
    Ok(accs.iter().map(|a| a.report(is_thing)).collect())
}

/// Class-agnostic AR@`k` on thing segments for each prediction set.
pub fn proposal_ar(model: &Mask2Former, scenes: &[Scene], k: usize) -> Result<Vec<f64>> {
    let n_sets = model.config().num_predictions();
    let mut props: Vec<Vec<Vec<Mask>>> = vec![Vec::with_capacity(scenes.len()); n_sets];
    let gts: Vec<GroundTruthScene> = scenes.iter().map(|s| s.truth.instance_view()).collect();
    for s in scenes {
        let gt = &s.truth;
        for (l, (cl, ml)) in all_prediction_sets(model, &s.image)?.iter().enumerate() {
            props[l].push(proposal_masks(cl, ml, gt.height, gt.width, k)?);
        }
    }
    Ok(props
        .iter()
        .map(|per_image| {
            let pairs: Vec<(&[Mask], &GroundTruthScene)> = per_image.iter().map(|p| p.as_slice()).zip(&gts).collect();
            ar_at_k(&pairs, k)
        })
        .collect())
}

/// Mean attention mass inside and outside the matched ground-truth mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FgStats {
    /// `(fg, bg)` per pyramid level, ordered 1/32, 1/16, 1/8.
    pub per_scale: [(f64, f64); NUM_SCALES],
    /// Queries averaged per level.
    pub counts: [usize; NUM_SCALES],
    pub overall: (f64, f64),
    /// Largest `|fg + bg − 1|` seen for a single query.
    pub max_partition_error: f64,
}

/// For each image, final-layer predictions are matched to ground truth
/// (dense cell-center costs); every matched query's cross-attention,
/// averaged over heads, is split by the ground-truth mask resized to that
/// layer's feature resolution.
pub fn attention_fg_stats(model: &Mask2Former, scenes: &[Scene]) -> Result<FgStats> {
    let mut sums = [(0.0, 0.0); NUM_SCALES];
    let mut counts = [0usize; NUM_SCALES];
    let mut max_err: f64 = 0.0;
    let heads = model.config().heads;
    for s in scenes {
        let gt = &s.truth;
        if gt.segments.is_empty() {
            continue;
        }
        let (tape, out) = model.infer(&s.image)?;
        let last = out.last();
        let masks = tape.value(last.mask_logits);
        let pts = PointSet::grid_centers(masks.shape()[1], masks.shape()[2]);
        let cost = matching_cost(tape.value(last.class_logits), masks, gt, &pts, &LossWeights::default())?;
        let assignment = hungarian(&cost)?;
        for rec in &out.attention {
            let probs = tape
                .attention_probs(rec.node)
                .ok_or_else(|| Error::InvalidArgument("attention record without probabilities".into()))?;
            let m = rec.height * rec.width;
            let n = probs.len() / (heads * m);
            for &(q, j) in &assignment.pairs {
                let fg_map = kernels::resize_forward(
                    gt.segments[j].mask.to_tensor().data(),
                    1,
                    gt.height,
                    gt.width,
                    rec.height,
                    rec.width,
                );
                let (mut fg, mut bg) = (0.0, 0.0);
                for h in 0..heads {
                    let row = &probs[(h * n + q) * m..(h * n + q + 1) * m];
                    for (&a, &g) in row.iter().zip(&fg_map) {
                        if g >= 0.5 {
                            fg += a;
                        } else {
                            bg += a;
                        }
                    }
                }
                fg /= heads as f64;
                bg /= heads as f64;
                max_err = max_err.max((fg + bg - 1.0).abs());
                sums[rec.scale].0 += fg;
                sums[rec.scale].1 += bg;
                counts[rec.scale] += 1;
            }
        }
    }
    let mut stats = FgStats {
        counts,
        max_partition_error: max_err,
        ..FgStats::default()
    };
    let total: usize = counts.iter().sum();
    for l in 0..NUM_SCALES {
        if counts[l] > 0 {
            stats.per_scale[l] = (sums[l].0 / counts[l] as f64, sums[l].1 / counts[l] as f64);
        }
    }
    if total > 0 {
        let fg: f64 = sums.iter().map(|s| s.0).sum();
        let bg: f64 = sums.iter().map(|s| s.1).sum();
        stats.overall = (fg / total as f64, bg / total as f64);
    }
    Ok(stats)
}
