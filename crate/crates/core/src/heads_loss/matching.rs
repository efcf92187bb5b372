use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{LaneSegment, LossWeights, PredictedLane};

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `assignment[g]` is the prediction matched to groundtruth `g`.
    pub assignment: Vec<usize>,
    pub total_cost: Scalar,
}

/// Minimum-cost assignment of every row (groundtruth) of `cost: [G, N]` to a
/// distinct column (prediction), `G ≤ N`.
///
/// Kuhn–Munkres with row/column potentials and shortest augmenting paths,
/// `O(G²·N)`.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    let (g, n) = match cost.shape() {
        [g, n] => (*g, *n),
        s => return Err(Error::Dimension(format!("cost matrix must be 2-D, got {s:?}"))),
    };
    if g > n {
        return Err(Error::Capacity(format!(
            "{g} groundtruth segments exceed {n} predictions"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("hungarian_match cost matrix"));
    }
    let c = |i: usize, j: usize| cost.data()[(i - 1) * n + (j - 1)];
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; g + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=g {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![Scalar::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = Scalar::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
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
    let mut assignment = vec![0usize; g];
    for j in 1..=n {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = assignment.iter().enumerate().map(|(i, &j)| cost.data()[i * n + j]).sum();
    Ok(MatchResult { assignment, total_cost })
}

fn mean_l1(a: &[[Scalar; 2]], b: &[[Scalar; 2]]) -> Scalar {
    let sum: Scalar = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs())
        .sum();
    sum / a.len() as Scalar
}

/// `λ_cls·(−p(gt class)) + λ_pts·mean L1(centerline) + λ_bnd·mean L1(both
/// boundaries)`, distances in metres.
pub fn match_cost(pred: &PredictedLane, gt: &LaneSegment, weights: &LossWeights) -> Scalar {
    let cls = -pred.class_probs[gt.class_id as usize];
    let pts = mean_l1(&pred.segment.centerline, &gt.centerline);
    let bnd = 0.5 * (mean_l1(&pred.segment.left, &gt.left) + mean_l1(&pred.segment.right, &gt.right));
    weights.cls * cls + weights.pts * pts + weights.bnd * bnd
}

/// `[G, N_q]` matching costs.
pub fn cost_matrix(preds: &[PredictedLane], gts: &[LaneSegment], weights: &LossWeights) -> Result<Tensor> {
    let data = gts
        .iter()
        .flat_map(|g| preds.iter().map(move |p| match_cost(p, g, weights)))
        .collect();
    Tensor::new(vec![gts.len(), preds.len()], data)
}
