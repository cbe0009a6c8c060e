//! Set-prediction objective: per-layer bipartite matching on shared uniform
//! points, then point-sampled mask losses and weighted cross-entropy.

pub mod hungarian;
pub mod matching;
pub mod points;

pub use hungarian::{assignment_cost, hungarian, MatchAssignment};
pub use matching::{bce_loss, dice_loss, matching_cost, matching_cost_with_stats, CostStats};
pub use points::{point_sample, sample_points_importance, sample_points_uniform, PointSet};

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::SegmentPrediction;
use crate::rng::{rng_from_seed, Rng};
use crate::scene::GroundTruthScene;
use crate::tensor::{Tape, Var};

use matching::{cost_from_targets, target_maps};
use points::{importance_from_map, sample_slice};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
    pub cls: f64,
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 5.0,
            dice: 5.0,
            cls: 2.0,
            no_object: 0.1,
        }
    }
}

/// Where mask losses are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointMode {
    /// `K` sampled points: uniform for matching, importance-sampled per pair
    /// for the final loss.
    Point,
    /// Every cell center of the prediction grid (dense loss).
    Mask,
}

impl fmt::Display for PointMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PointMode::Point => "point",
            PointMode::Mask => "mask",
        })
    }
}

impl FromStr for PointMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(PointMode::Point),
            "mask" => Ok(PointMode::Mask),
            _ => Err(Error::Config(format!("unknown loss_points value {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub num_points: usize,
    pub points: PointMode,
    /// Whether prediction set 0 (from the initial queries) is supervised.
    pub supervise_initial: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            num_points: 1024,
            points: PointMode::Point,
            supervise_initial: true,
        }
    }
}

/// Unweighted loss terms of one prediction set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerLoss {
    pub cls: f64,
    pub ce: f64,
    pub dice: f64,
}

impl LayerLoss {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.cls * self.cls + w.ce * self.ce + w.dice * self.dice
    }
}

/// Counters for sampling and point reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossStats {
    /// One shared uniform set per matched prediction set.
    pub uniform_point_sets: usize,
    /// One per matched (prediction, ground truth) pair.
    pub importance_point_sets: usize,
    pub matching: CostStats,
    /// Point reads in the final mask losses (`K` per matched pair).
    pub loss_point_evals: usize,
}

impl LossStats {
    fn add_cost(&mut self, c: CostStats) {
        self.matching.pair_point_evals += c.pair_point_evals;
        self.matching.prediction_reads += c.prediction_reads;
        self.matching.target_reads += c.target_reads;
    }
}

pub struct LossOutput {
    pub total: Var,
    /// One entry per prediction set; `None` where the set is unsupervised.
    pub layers: Vec<Option<LayerLoss>>,
    pub matches: Vec<Option<MatchAssignment>>,
    pub stats: LossStats,
}

struct LayerResult {
    loss: Var,
    terms: LayerLoss,
    assignment: MatchAssignment,
}

/// Sum over prediction sets of `λ_cls·L_cls + λ_ce·L_ce + λ_dice·L_dice`,
/// each set matched independently. Per-layer randomness comes from seeds
/// drawn from `rng` in layer order.
pub fn total_loss(
    tape: &mut Tape,
    preds: &[SegmentPrediction],
    gt: &GroundTruthScene,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<LossOutput> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no prediction sets".into()));
    }
    let targets = target_maps(gt);
    let labels: Vec<usize> = gt.segments.iter().map(|s| s.class).collect();
    let mut stats = LossStats::default();
    let mut layers = Vec::with_capacity(preds.len());
    let mut matches = Vec::with_capacity(preds.len());
    let mut total: Option<Var> = None;
    for (l, pred) in preds.iter().enumerate() {
        let mut layer_rng = rng_from_seed(rng.gen());
        if l == 0 && !cfg.supervise_initial {
            layers.push(None);
            matches.push(None);
            continue;
        }
        let r = layer_loss(tape, pred, &targets, &labels, cfg, &mut layer_rng, &mut stats)?;
        total = Some(match total {
            Some(t) => tape.add(t, r.loss)?,
            None => r.loss,
        });
        layers.push(Some(r.terms));
        matches.push(Some(r.assignment));
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no supervised prediction sets".into()))?;
    Ok(LossOutput {
        total,
        layers,
        matches,
        stats,
    })
}

fn layer_loss(
    tape: &mut Tape,
    pred: &SegmentPrediction,
    targets: &[crate::tensor::Tensor],
    labels: &[usize],
    cfg: &LossConfig,
    rng: &mut Rng,
    stats: &mut LossStats,
) -> Result<LayerResult> {
    let w = &cfg.weights;
    let class_vals = tape.value(pred.class_logits).clone();
    let (n, c) = (class_vals.shape()[0], class_vals.shape()[1]);
    let mask_shape = tape.shape(pred.mask_logits).to_vec();
    let (h, wd) = (mask_shape[1], mask_shape[2]);
    let g = targets.len();

    let assignment = if g == 0 {
        MatchAssignment {
            pairs: Vec::new(),
            unmatched: (0..n).collect(),
        }
    } else {
        let pts = match cfg.points {
            PointMode::Point => {
                stats.uniform_point_sets += 1;
                sample_points_uniform(cfg.num_points, rng)
            }
            PointMode::Mask => PointSet::grid_centers(h, wd),
        };
        let (cost, cs) = cost_from_targets(&class_vals, tape.value(pred.mask_logits), targets, labels, &pts, w)?;
        stats.add_cost(cs);
        hungarian(&cost)?
    };

    let no_object = c - 1;
    let mut cls_targets = vec![no_object; n];
    let mut cls_weights = vec![w.no_object; n];
    for &(p, gi) in &assignment.pairs {
        cls_targets[p] = labels[gi];
        cls_weights[p] = 1.0;
    }
    let ce_cls = tape.cross_entropy(pred.class_logits, &cls_targets, &cls_weights)?;
    let mut terms = LayerLoss {
        cls: tape.value(ce_cls).item(),
        ..LayerLoss::default()
    };
    let mut loss = tape.scale(ce_cls, w.cls)?;

    if !assignment.pairs.is_empty() {
        let mask_vals = tape.value(pred.mask_logits).data().to_vec();
        let mut rows = Vec::with_capacity(g);
        let mut sets = Vec::with_capacity(g);
        let mut target_pts = Vec::new();
        for &(p, gi) in &assignment.pairs {
            let pts = match cfg.points {
                PointMode::Point => {
                    stats.importance_point_sets += 1;
                    importance_from_map(&mask_vals[p * h * wd..(p + 1) * h * wd], h, wd, cfg.num_points, rng)
                }
                PointMode::Mask => PointSet::grid_centers(h, wd),
            };
            let t = &targets[gi];
            target_pts.extend(sample_slice(t.data(), t.shape()[0], t.shape()[1], &pts));
            stats.loss_point_evals += pts.len();
            rows.push(p);
            sets.push(pts);
        }
        let refs: Vec<&[(f64, f64)]> = sets.iter().map(|s| s.coords.as_slice()).collect();
        let sampled = tape.point_sample(pred.mask_logits, &rows, &refs)?;
        let bce = tape.bce_rows(sampled, target_pts.clone())?;
        let bce = tape.mean(bce)?;
        let dice = tape.dice_rows(sampled, target_pts)?;
        let dice = tape.mean(dice)?;
        terms.ce = tape.value(bce).item();
        terms.dice = tape.value(dice).item();
        let bce = tape.scale(bce, w.ce)?;
        let dice = tape.scale(dice, w.dice)?;
        loss = tape.add(loss, bce)?;
        loss = tape.add(loss, dice)?;
    }
    Ok(LayerResult {
        loss,
        terms,
        assignment,
    })
}
