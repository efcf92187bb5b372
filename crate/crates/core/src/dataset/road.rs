//! Arc-length parametrized road reference curves and lane groundtruth.

use super::quantize;
use crate::geometry::{BevExtent, Pose2, Vec2};
use crate::heads_loss::LaneSegment;
use crate::tensor::Scalar;

/// Sampling step used to find where a lane enters and leaves the BEV area.
const CLIP_STEP: Scalar = 0.05;
/// Lanes whose visible stretch is shorter than this are not annotated.
const MIN_VISIBLE_LENGTH: Scalar = 2.0;

/// Constant-curvature reference curve in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Road {
    pub origin: Vec2,
    pub heading: Scalar,
    pub curvature: Scalar,
    pub s_range: (Scalar, Scalar),
}

impl Road {
    pub fn heading_at(&self, s: Scalar) -> Scalar {
        self.heading + self.curvature * s
    }

    /// World point at arc length `s` and lateral offset `offset` (left
    /// positive).
    pub fn point(&self, s: Scalar, offset: Scalar) -> Vec2 {
        let (s0, c0) = self.heading.sin_cos();
        let theta = self.heading_at(s);
        let (st, ct) = theta.sin_cos();
        let centre = if self.curvature == 0.0 {
            [self.origin[0] + s * c0, self.origin[1] + s * s0]
        } else {
            let k = self.curvature;
            [self.origin[0] + (st - s0) / k, self.origin[1] - (ct - c0) / k]
        };
        [centre[0] - offset * st, centre[1] + offset * ct]
    }

    pub fn polyline(&self, offset: Scalar, step: Scalar) -> Vec<Vec2> {
        let (a, b) = self.s_range;
        let n = ((b - a) / step).ceil() as usize;
        (0..=n)
            .map(|i| self.point((a + i as Scalar * step).min(b), offset))
            .collect()
    }
}

/// One annotated lane: a strip of the road at a fixed lateral offset.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LaneSpec {
    pub road: Road,
    pub offset: Scalar,
    pub half_width: Scalar,
    pub class_id: u8,
}

impl LaneSpec {
    fn ego_points(&self, pose: &Pose2, s: Scalar) -> [Vec2; 3] {
        [
            pose.to_ego(self.road.point(s, self.offset)),
            pose.to_ego(self.road.point(s, self.offset + self.half_width)),
            pose.to_ego(self.road.point(s, self.offset - self.half_width)),
        ]
    }

    /// Groundtruth for the longest stretch of this lane whose centerline and
    /// boundaries all lie inside `extent`, resampled to `points` points
    /// evenly spaced in arc length.
    pub fn groundtruth(&self, pose: &Pose2, extent: &BevExtent, points: usize) -> Option<LaneSegment> {
        let (a, b) = self.road.s_range;
        let n = ((b - a) / CLIP_STEP).floor() as usize;
        let mut best: Option<(Scalar, Scalar)> = None;
        let mut run: Option<Scalar> = None;
        for i in 0..=n + 1 {
            let s = a + i as Scalar * CLIP_STEP;
            let inside = i <= n && self.ego_points(pose, s).iter().all(|p| extent.contains(*p));
            match (inside, run) {
                (true, None) => run = Some(s),
                (false, Some(start)) => {
                    let end = s - CLIP_STEP;
                    if best.map_or(true, |(bs, be)| end - start > be - bs) {
                        best = Some((start, end));
                    }
                    run = None;
                }
                _ => {}
            }
        }
        let (start, end) = best?;
        if end - start < MIN_VISIBLE_LENGTH {
            return None;
        }
        let mut seg = LaneSegment {
            centerline: Vec::with_capacity(points),
            left: Vec::with_capacity(points),
            right: Vec::with_capacity(points),
            class_id: self.class_id,
            score: 1.0,
        };
        for i in 0..points {
            let s = start + (end - start) * i as Scalar / (points - 1) as Scalar;
            // Quantization may nudge a point across the border by ~1e-8.
            let [c, l, r] = self.ego_points(pose, s).map(|p| {
                [
                    quantize(p[0]).clamp(extent.x_min, extent.x_max),
                    quantize(p[1]).clamp(extent.y_min, extent.y_max),
                ]
            });
            seg.centerline.push(c);
            seg.left.push(l);
            seg.right.push(r);
        }
        Some(seg)
    }
}
