//! Minimum-cost bipartite assignment (Kuhn–Munkres with potentials).

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Matched `(prediction, ground truth)` pairs, sorted by ground-truth index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl MatchAssignment {
    /// Ground-truth index assigned to each prediction.
    pub fn gt_for_prediction(&self, n: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

/// Assigns every ground truth (column) of an `[N, G]` cost matrix to a
/// distinct prediction (row), minimizing the total cost.
pub fn hungarian(cost: &Tensor) -> Result<MatchAssignment> {
    let (n, g) = match cost.shape() {
        &[n, g] => (n, g),
        s => return Err(shape_err("hungarian", format!("{s:?}"))),
    };
    if g > n {
        return Err(Error::InvalidArgument(format!("{g} ground-truth segments for {n} predictions")));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite { op: "hungarian" });
    }
    let c = |gt: usize, pred: usize| cost.data()[pred * g + gt];

    // Rows are ground truths (1-based), columns predictions; index 0 is the
    // virtual start column.
    let mut u = vec![0.0; g + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=g {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| owner[j] != 0)
        .map(|j| (j - 1, owner[j] - 1))
        .collect();
    pairs.sort_by_key(|&(_, gt)| gt);
    let unmatched = (1..=n).filter(|&j| owner[j] == 0).map(|j| j - 1).collect();
    Ok(MatchAssignment { pairs, unmatched })
}

/// Total cost of an assignment, summed in ground-truth order.
pub fn assignment_cost(cost: &Tensor, m: &MatchAssignment) -> f64 {
    let g = cost.shape()[1];
    m.pairs.iter().map(|&(p, gt)| cost.data()[p * g + gt]).sum()
}
