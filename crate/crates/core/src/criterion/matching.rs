//! Scalar mask losses and the matching cost matrix.

use crate::error::{shape_err, Error, Result};
use crate::scene::GroundTruthScene;
use crate::tensor::{kernels, Tensor};

use super::points::{sample_maps, sample_slice, PointSet};
use super::LossWeights;

fn check_points(op: &'static str, pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(shape_err(op, format!("{} predictions, {} targets", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument(format!("{op} over zero points")));
    }
    Ok(())
}

/// Mean binary cross-entropy of logits against targets in `[0, 1]`.
pub fn bce_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_points("bce_loss", pred, gt)?;
    let s: f64 = pred.iter().zip(gt).map(|(&p, &g)| kernels::softplus(p) - g * p).sum();
    Ok(s / pred.len() as f64)
}

/// `1 − (2Σσ(p)g + 1)/(Σσ(p) + Σg + 1)`.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_points("dice_loss", pred, gt)?;
    let (num, den) = crate::tensor::dice_terms(pred, gt);
    Ok(1.0 - num / den)
}

/// Point reads performed while building a cost matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostStats {
    /// `(prediction, ground truth, point)` evaluations: exactly `N·G·K`.
    pub pair_point_evals: usize,
    pub prediction_reads: usize,
    pub target_reads: usize,
}

/// GT masks as `[H, W]` maps of 0/1.
pub(crate) fn target_maps(gt: &GroundTruthScene) -> Vec<Tensor> {
    gt.segments.iter().map(|s| s.mask.to_tensor()).collect()
}

/// `[N, G]` cost `λ_cls·(−p_i[label_j]) + λ_ce·bce + λ_dice·dice` on one
/// shared point set. Values only; nothing here is differentiated.
pub fn matching_cost(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    gt: &GroundTruthScene,
    pts: &PointSet,
    w: &LossWeights,
) -> Result<Tensor> {
    matching_cost_with_stats(class_logits, mask_logits, gt, pts, w).map(|(c, _)| c)
}

pub fn matching_cost_with_stats(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    gt: &GroundTruthScene,
    pts: &PointSet,
    w: &LossWeights,
) -> Result<(Tensor, CostStats)> {
    let targets = target_maps(gt);
    let labels: Vec<usize> = gt.segments.iter().map(|s| s.class).collect();
    cost_from_targets(class_logits, mask_logits, &targets, &labels, pts, w)
}

pub(crate) fn cost_from_targets(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    targets: &[Tensor],
    labels: &[usize],
    pts: &PointSet,
    w: &LossWeights,
) -> Result<(Tensor, CostStats)> {
    let (n, c) = match class_logits.shape() {
        &[n, c] => (n, c),
        s => return Err(shape_err("matching_cost", format!("class logits {s:?}"))),
    };
    let (mn, h, wd) = match mask_logits.shape() {
        &[a, b, c] => (a, b, c),
        s => return Err(shape_err("matching_cost", format!("mask logits {s:?}"))),
    };
    if mn != n {
        return Err(shape_err("matching_cost", format!("{n} class rows, {mn} masks")));
    }
    let g = targets.len();
    if g > n {
        return Err(Error::InvalidArgument(format!("{g} ground-truth segments for {n} queries")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l + 1 >= c) {
        return Err(shape_err("matching_cost", format!("label {l} with {c} logits")));
    }
    let k = pts.len();
    if k == 0 && g > 0 {
        return Err(Error::InvalidArgument("matching on zero points".into()));
    }
    let mut stats = CostStats::default();
    let mut probs = class_logits.data().to_vec();
    for row in probs.chunks_mut(c) {
        kernels::softmax_in_place(row)?;
    }
    let pred_pts = sample_maps(mask_logits.data().chunks_exact(h * wd), h, wd, pts);
    stats.prediction_reads = n * k;
    let gt_pts = match targets.first().map(|t| t.shape()) {
        Some(&[th, tw]) if targets.iter().all(|t| t.shape() == [th, tw]) => {
            sample_maps(targets.iter().map(|t| t.data()), th, tw, pts)
        }
        _ => targets
            .iter()
            .map(|t| sample_slice(t.data(), t.shape()[0], t.shape()[1], pts))
            .collect(),
    };
    stats.target_reads = g * k;

    let mut cost = vec![0.0; n * g];
    for (i, p) in pred_pts.iter().enumerate() {
        let (sig, sp): (Vec<f64>, Vec<f64>) = p.iter().map(|&v| kernels::sigmoid_softplus(v)).unzip();
        let sp: f64 = sp.iter().sum();
        let sig_sum: f64 = sig.iter().sum();
        for (j, t) in gt_pts.iter().enumerate() {
            let mut pt = 0.0;
            let mut st = 0.0;
            let mut tsum = 0.0;
            for ((&pv, &sv), &tv) in p.iter().zip(&sig).zip(t) {
                pt += pv * tv;
                st += sv * tv;
                tsum += tv;
            }
            stats.pair_point_evals += k;
            let bce = (sp - pt) / k as f64;
            let dice = 1.0 - (2.0 * st + 1.0) / (sig_sum + tsum + 1.0);
            let cls = -probs[i * c + labels[j]];
            cost[i * g + j] = w.cls * cls + w.ce * bce + w.dice * dice;
        }
    }
    Ok((Tensor::new(vec![n, g], cost)?, stats))
}
