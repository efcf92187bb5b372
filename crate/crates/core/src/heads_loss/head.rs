use crate::autodiff::{self, Var};
use crate::error::Result;
use crate::geometry::BevExtent;
use crate::lane_decoder::LaneQuerySet;
use crate::nn::{Ctx, Initializer, Linear, Mlp};
use crate::tensor::{Scalar, Tensor};

use super::{LaneSegment, NUM_CLASSES};

/// Squared-length floor when normalizing centerline tangents.
const TANGENT_EPS: Scalar = 1e-6;
/// Initial half-width of predicted segments, metres.
const INITIAL_HALF_WIDTH: Scalar = 1.75;

/// Maps lane queries to class logits, a `P`-point centerline relative to the
/// query's reference point, and left/right boundaries as lateral offsets
/// from that centerline.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub points: usize,
    pub class: Linear,
    /// `2P` centerline deltas in reference-logit space.
    pub geometry: Mlp,
    /// `2P` left/right lateral offsets in metres.
    pub width: Mlp,
}

/// Head outputs for one decoder layer, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput<'t> {
    /// `[N_q, 3]`
    pub class_logits: Var<'t>,
    /// `[N_q, P, 2]` metric `(x, y)`.
    pub centerline: Var<'t>,
    pub left: Var<'t>,
    pub right: Var<'t>,
}

/// A decoded prediction with its full class distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedLane {
    /// Foreground class with the highest probability, scored by it.
    pub segment: LaneSegment,
    pub class_probs: [Scalar; NUM_CLASSES],
}

impl PredictionHead {
    pub fn new(init: &mut Initializer<'_>, dim: usize, points: usize) -> Result<Self> {
        let width = Mlp::zero_output(init, "head.width", dim, dim, 2 * points)?;
        let bias = width.fc2.bias.expect("linear layers carry a bias");
        for v in init.store_mut().get_mut(bias).data_mut() {
            *v = INITIAL_HALF_WIDTH;
        }
        Ok(Self {
            points,
            class: Linear::new(init, "head.class", dim, NUM_CLASSES)?,
            geometry: Mlp::zero_output(init, "head.geometry", dim, dim, 2 * points)?,
            width,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, q: &LaneQuerySet<'t>, extent: &BevExtent) -> Result<HeadOutput<'t>> {
        let n = q.len();
        let p = self.points;
        let class_logits = self.class.forward(cx, q.embed)?;

        // Normalized (u, v) per point, then metric (x, y) = (x_min + v·Δx, y_min + u·Δy).
        let deltas = self.geometry.forward(cx, q.embed)?.reshape(vec![n, p, 2])?;
        let uv = deltas.add(q.ref_logits.reshape(vec![n, 1, 2])?)?.sigmoid()?;
        let vu = uv.index_select(2, &[1, 0])?;
        let span = cx.constant(Tensor::new(vec![1, 1, 2], vec![extent.x_span(), extent.y_span()])?);
        let origin = cx.constant(Tensor::new(vec![1, 1, 2], vec![extent.x_min, extent.y_min])?);
        let centerline = vu.mul(span)?.add(origin)?;

        // Unit left normal from central-difference tangents.
        let next: Vec<usize> = (0..p).map(|i| (i + 1).min(p - 1)).collect();
        let prev: Vec<usize> = (0..p).map(|i| i.saturating_sub(1)).collect();
        let tangent = centerline.index_select(1, &next)?.sub(centerline.index_select(1, &prev)?)?;
        let tx = tangent.narrow(2, 0, 1)?;
        let ty = tangent.narrow(2, 1, 1)?;
        let len = tx.mul(tx)?.add(ty.mul(ty)?)?.add_scalar(TANGENT_EPS)?.sqrt()?;
        let normal = autodiff::concat(&[ty.neg()?, tx], 2)?.div(len)?;

        let widths = self.width.forward(cx, q.embed)?.reshape(vec![n, p, 2])?;
        let left = centerline.add(normal.mul(widths.narrow(2, 0, 1)?)?)?;
        let right = centerline.sub(normal.mul(widths.narrow(2, 1, 1)?)?)?;
        Ok(HeadOutput {
            class_logits,
            centerline,
            left,
            right,
        })
    }
}

impl HeadOutput<'_> {
    /// Decodes every query into a scored lane segment (always `N_q` items).
    pub fn predictions(&self) -> Vec<PredictedLane> {
        let logits = self.class_logits.value();
        let (c, l, r) = (self.centerline.value(), self.left.value(), self.right.value());
        let n = logits.shape()[0];
        let p = c.shape()[1];
        let pts = |t: &Tensor, i: usize| -> Vec<[Scalar; 2]> {
            t.data()[i * 2 * p..(i + 1) * 2 * p]
                .chunks_exact(2)
                .map(|xy| [xy[0], xy[1]])
                .collect()
        };
        (0..n)
            .map(|i| {
                let row = &logits.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
                let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
                let exp: Vec<Scalar> = row.iter().map(|v| (v - max).exp()).collect();
                let z: Scalar = exp.iter().sum();
                let mut probs = [0.0; NUM_CLASSES];
                for (o, e) in probs.iter_mut().zip(&exp) {
                    *o = e / z;
                }
                let class_id = if probs[2] > probs[1] { 2 } else { 1 };
                PredictedLane {
                    segment: LaneSegment {
                        centerline: pts(&c, i),
                        left: pts(&l, i),
                        right: pts(&r, i),
                        class_id,
                        score: probs[class_id as usize],
                    },
                    class_probs: probs,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::ParamStore;

    fn setup() -> (ParamStore, PredictionHead) {
        let mut store = ParamStore::new();
        let head = {
            let mut init = Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(1));
            PredictionHead::new(&mut init, 8, 10).unwrap()
        };
        (store, head)
    }

    #[test]
    fn zero_geometry_collapses_to_reference_point() {
        let (store, head) = setup();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let refs = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, -2.0]).unwrap();
        let q = LaneQuerySet {
            embed: cx.constant(Tensor::from_fn(vec![2, 8], |i| (i as f64).sin())),
            ref_logits: cx.constant(refs.clone()),
        };
        let extent = BevExtent::default();
        let out = head.forward(&cx, &q, &extent).unwrap();
        let preds = out.predictions();
        assert_eq!(preds.len(), 2);
        for (i, p) in preds.iter().enumerate() {
            let uv = [
                1.0 / (1.0 + (-refs.get(&[i, 0])).exp()),
                1.0 / (1.0 + (-refs.get(&[i, 1])).exp()),
            ];
            let m = extent.from_normalized(uv);
            for pt in &p.segment.centerline {
                assert!((pt[0] - m[0]).abs() < 1e-12 && (pt[1] - m[1]).abs() < 1e-12);
            }
            let s: f64 = p.class_probs.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert_eq!(p.segment.score, p.class_probs[p.segment.class_id as usize]);
        }
    }

    #[test]
    fn boundaries_sit_on_either_side_of_a_straight_centerline() {
        let (mut store, head) = setup();
        // Centerline along +x: deltas grow in v (x direction) only.
        let b = store.get_mut(head.geometry.fc2.bias.unwrap());
        for i in 0..10 {
            b.data_mut()[2 * i + 1] = -1.0 + 0.2 * i as f64;
        }
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let q = LaneQuerySet {
            embed: cx.constant(Tensor::zeros(vec![1, 8])),
            ref_logits: cx.constant(Tensor::zeros(vec![1, 2])),
        };
        let p = head.forward(&cx, &q, &BevExtent::default()).unwrap().predictions().remove(0);
        for i in 0..10 {
            let c = p.segment.centerline[i];
            assert!((p.segment.left[i][1] - (c[1] + 1.75)).abs() < 1e-6);
            assert!((p.segment.right[i][1] - (c[1] - 1.75)).abs() < 1e-6);
            assert!((p.segment.left[i][0] - c[0]).abs() < 1e-9);
        }
    }
}
