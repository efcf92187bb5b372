use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::BevExtent;
use crate::nn::Ctx;
use crate::tensor::{Scalar, Tensor};

use super::{cost_matrix, hungarian_match, HeadOutput, LaneSegment, MatchResult, NUM_CLASSES};

/// Weights shared by the matching cost and the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: Scalar,
    pub pts: Scalar,
    pub bnd: Scalar,
    /// Cross-entropy weight of queries matched to no groundtruth.
    pub background: Scalar,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            pts: 5.0,
            bnd: 2.5,
            background: 0.1,
        }
    }
}

/// Weighted loss components; they sum to the total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: Scalar,
    pub pts: Scalar,
    pub bnd: Scalar,
}

impl LossBreakdown {
    pub fn total(&self) -> Scalar {
        self.cls + self.pts + self.bnd
    }

    fn add_scaled(&mut self, other: &LossBreakdown, s: Scalar) {
        self.cls += s * other.cls;
        self.pts += s * other.pts;
        self.bnd += s * other.bnd;
    }
}

pub struct LossOutput<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    /// One matching per decoder layer.
    pub matches: Vec<MatchResult>,
}

fn polylines(gts: &[LaneSegment], pick: impl Fn(&LaneSegment) -> &Vec<[Scalar; 2]>) -> Result<Tensor> {
    let p = gts[0].points();
    let data: Vec<Scalar> = gts.iter().flat_map(|g| pick(g).iter().flat_map(|xy| *xy)).collect();
    Tensor::new(vec![gts.len(), p, 2], data)
}

/// Sum over matched pairs of `Σ_points |Δx|/span_x + |Δy|/span_y`.
fn l1_normalized<'t>(cx: &Ctx<'t, '_>, pred: Var<'t>, idx: &[usize], gt: Tensor, extent: &BevExtent) -> Result<Var<'t>> {
    let scale = Tensor::new(vec![1, 1, 2], vec![1.0 / extent.x_span(), 1.0 / extent.y_span()])?;
    pred.index_select(0, idx)?
        .sub(cx.constant(gt))?
        .abs()?
        .mul(cx.constant(scale))?
        .sum()
}

/// Loss of one decoder layer's predictions.
///
/// Predictions are matched to groundtruth by [`hungarian_match`] on the
/// metric matching cost. Classification is weighted cross-entropy
/// (unmatched queries target background with weight `background`,
/// normalized by the total weight); point terms are L1 distances in
/// normalized BEV coordinates, averaged over points and matched pairs.
pub fn layer_loss<'t>(
    cx: &Ctx<'t, '_>,
    out: &HeadOutput<'t>,
    gts: &[LaneSegment],
    weights: &LossWeights,
    extent: &BevExtent,
) -> Result<(Var<'t>, LossBreakdown, MatchResult)> {
    let preds = out.predictions();
    let n = preds.len();
    let p = out.centerline.shape()[1];
    if let Some(g) = gts.iter().find(|g| g.points() != p || g.left.len() != p || g.right.len() != p) {
        return Err(Error::Dimension(format!(
            "groundtruth segment has {} points, head predicts {p}",
            g.points()
        )));
    }
    let matching = if gts.is_empty() {
        MatchResult {
            assignment: Vec::new(),
            total_cost: 0.0,
        }
    } else {
        hungarian_match(&cost_matrix(&preds, gts, weights)?)?
    };

    let mut target = vec![0u8; n];
    for (g, &q) in matching.assignment.iter().enumerate() {
        target[q] = gts[g].class_id;
    }
    let w: Vec<Scalar> = target
        .iter()
        .map(|&t| if t == 0 { weights.background } else { 1.0 })
        .collect();
    let norm: Scalar = w.iter().sum();
    let mut sel = vec![0.0; n * NUM_CLASSES];
    for (i, (&t, &wi)) in target.iter().zip(&w).enumerate() {
        sel[i * NUM_CLASSES + t as usize] = -wi / norm;
    }
    let cls = out
        .class_logits
        .log_softmax()?
        .mul(cx.constant(Tensor::new(vec![n, NUM_CLASSES], sel)?))?
        .sum()?;
    let mut total = cls.scale(weights.cls)?;
    let mut breakdown = LossBreakdown {
        cls: weights.cls * cls.item()?,
        ..Default::default()
    };

    if !gts.is_empty() {
        let idx = &matching.assignment;
        let denom = (gts.len() * p) as Scalar;
        let pts = l1_normalized(cx, out.centerline, idx, polylines(gts, |g| &g.centerline)?, extent)?.scale(1.0 / denom)?;
        let left = l1_normalized(cx, out.left, idx, polylines(gts, |g| &g.left)?, extent)?;
        let right = l1_normalized(cx, out.right, idx, polylines(gts, |g| &g.right)?, extent)?;
        let bnd = left.add(right)?.scale(0.5 / denom)?;
        breakdown.pts = weights.pts * pts.item()?;
        breakdown.bnd = weights.bnd * bnd.item()?;
        total = total.add(pts.scale(weights.pts)?)?.add(bnd.scale(weights.bnd)?)?;
    }
    Ok((total, breakdown, matching))
}

/// Mean of [`layer_loss`] over all supervised decoder layers.
pub fn total_loss<'t>(
    cx: &Ctx<'t, '_>,
    outputs: &[HeadOutput<'t>],
    gts: &[LaneSegment],
    weights: &LossWeights,
    extent: &BevExtent,
) -> Result<LossOutput<'t>> {
    if outputs.is_empty() {
        return Err(Error::Config("loss needs at least one decoder layer".into()));
    }
    let s = 1.0 / outputs.len() as Scalar;
    let mut breakdown = LossBreakdown::default();
    let mut matches = Vec::with_capacity(outputs.len());
    let mut total: Option<Var<'t>> = None;
    for out in outputs {
        let (l, b, m) = layer_loss(cx, out, gts, weights, extent)?;
        breakdown.add_scaled(&b, s);
        matches.push(m);
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    Ok(LossOutput {
        total: total.expect("non-empty").scale(s)?,
        breakdown,
        matches,
    })
}
