//! Lane-segment prediction head, set matching against groundtruth and the
//! training loss.

mod head;
mod loss;
mod matching;

pub use head::{HeadOutput, PredictedLane, PredictionHead};
pub use loss::{layer_loss, total_loss, LossBreakdown, LossOutput, LossWeights};
pub use matching::{cost_matrix, hungarian_match, match_cost, MatchResult};

use crate::geometry::Vec2;
use crate::tensor::Scalar;

/// Classes: 0 background (no object), 1 lane segment, 2 pedestrian crossing.
pub const NUM_CLASSES: usize = 3;
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_LANE: u8 = 1;
pub const CLASS_CROSSING: u8 = 2;

/// One lane instance in metric ego coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneSegment {
    pub centerline: Vec<Vec2>,
    pub left: Vec<Vec2>,
    pub right: Vec<Vec2>,
    pub class_id: u8,
    pub score: Scalar,
}

impl LaneSegment {
    pub fn points(&self) -> usize {
        self.centerline.len()
    }
}
