//! Average precision of predicted lane segments, matched to groundtruth by
//! centerline Chamfer distance at several metric thresholds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::heads_loss::{LaneSegment, CLASS_CROSSING, CLASS_LANE};
use crate::tensor::Scalar;

pub const DEFAULT_THRESHOLDS: [Scalar; 3] = [0.5, 1.0, 1.5];
pub const EVAL_CLASSES: [u8; 2] = [CLASS_LANE, CLASS_CROSSING];

/// Symmetric Chamfer distance: the mean of the two directed mean
/// nearest-point distances.
pub fn chamfer_distance(a: &[Vec2], b: &[Vec2]) -> Result<Scalar> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Value("chamfer distance of an empty polyline".into()));
    }
    Ok(0.5 * (directed(a, b) + directed(b, a)))
}

fn directed(a: &[Vec2], b: &[Vec2]) -> Scalar {
    let sum: Scalar = a
        .iter()
        .map(|p| {
            b.iter()
                .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                .fold(Scalar::INFINITY, Scalar::min)
        })
        .sum();
    sum / a.len() as Scalar
}

/// Predictions and groundtruth of one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameEval<'a> {
    pub predictions: &'a [LaneSegment],
    pub groundtruth: &'a [LaneSegment],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ApResult {
    /// `None` when the class has no groundtruth.
    pub ap: Option<Scalar>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// AP of one class over several frames.
///
/// Predictions of the class are ranked by descending score across all
/// frames (ties keep input order). Each one claims the nearest unmatched
/// same-class groundtruth of its own frame if that lies within `threshold`
/// metres, otherwise it is a false positive. AP is the area under the
/// precision envelope (all-points interpolation).
pub fn average_precision_frames(frames: &[FrameEval<'_>], class_id: u8, threshold: Scalar) -> Result<ApResult> {
    let mut ranked: Vec<(usize, &LaneSegment)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| fr.predictions.iter().map(move |p| (f, p)))
        .filter(|(_, p)| p.class_id == class_id)
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let gts: Vec<Vec<&LaneSegment>> = frames
        .iter()
        .map(|fr| fr.groundtruth.iter().filter(|g| g.class_id == class_id).collect())
        .collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();

    let mut hits = Vec::with_capacity(ranked.len());
    for (f, pred) in &ranked {
        let mut best: Option<(usize, Scalar)> = None;
        for (j, gt) in gts[*f].iter().enumerate() {
            if taken[*f][j] {
                continue;
            }
            let d = chamfer_distance(&pred.centerline, &gt.centerline)?;
            if d <= threshold && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            taken[*f][j] = true;
        }
        hits.push(best.is_some());
    }
    let tp = hits.iter().filter(|&&h| h).count();
    let fp = hits.len() - tp;
    let ap = (n_gt > 0).then(|| pr_area(&hits, n_gt));
    Ok(ApResult {
        ap,
        tp,
        fp,
        fn_: n_gt - tp,
    })
}

/// Single-frame AP; `None` when there is no groundtruth of the class.
pub fn average_precision(
    predictions: &[LaneSegment],
    groundtruth: &[LaneSegment],
    class_id: u8,
    threshold: Scalar,
) -> Result<Option<Scalar>> {
    let frame = FrameEval {
        predictions,
        groundtruth,
    };
    Ok(average_precision_frames(&[frame], class_id, threshold)?.ap)
}

/// Area under the interpolated precision-recall curve of a ranked hit list.
fn pr_area(hits: &[bool], n_gt: usize) -> Scalar {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as Scalar / (i + 1) as Scalar);
        recall.push(tp as Scalar / n_gt as Scalar);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        area += (r - prev_recall) * p;
        prev_recall = *r;
    }
    area
}

/// Per-frame segments of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSegments {
    pub scene_id: String,
    pub frames: Vec<Vec<LaneSegment>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassThresholdEval {
    pub class_id: u8,
    pub threshold: Scalar,
    pub result: ApResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDiagnostics {
    pub scene_id: String,
    pub predictions: usize,
    pub groundtruth: usize,
    /// True positives at the loosest threshold.
    pub matched: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<Scalar>,
    pub entries: Vec<ClassThresholdEval>,
    /// Mean AP over every (class, threshold) pair whose class has
    /// groundtruth; 0 when no class does.
    pub map: Scalar,
    pub scenes: Vec<SceneDiagnostics>,
}

impl EvalReport {
    pub fn ap(&self, class_id: u8, threshold: Scalar) -> Option<Scalar> {
        self.entries
            .iter()
            .find(|e| e.class_id == class_id && e.threshold == threshold)
            .and_then(|e| e.result.ap)
    }

    /// Mean AP at one threshold over classes with groundtruth.
    pub fn map_at(&self, threshold: Scalar) -> Scalar {
        let aps: Vec<Scalar> = self
            .entries
            .iter()
            .filter(|e| e.threshold == threshold)
            .filter_map(|e| e.result.ap)
            .collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<Scalar>() / aps.len() as Scalar
        }
    }

    /// `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "map = {:.6}", self.map);
        for &t in &self.thresholds {
            let _ = writeln!(s, "map.t{t} = {:.6}", self.map_at(t));
        }
        for e in &self.entries {
            let key = format!("class{}.t{}", e.class_id, e.threshold);
            match e.result.ap {
                Some(ap) => {
                    let _ = writeln!(s, "ap.{key} = {ap:.6}");
                }
                None => {
                    let _ = writeln!(s, "ap.{key} = nan");
                }
            }
            let _ = writeln!(s, "tp.{key} = {}", e.result.tp);
            let _ = writeln!(s, "fp.{key} = {}", e.result.fp);
            let _ = writeln!(s, "fn.{key} = {}", e.result.fn_);
        }
        for d in &self.scenes {
            let _ = writeln!(s, "scene.{}.predictions = {}", d.scene_id, d.predictions);
            let _ = writeln!(s, "scene.{}.groundtruth = {}", d.scene_id, d.groundtruth);
            let _ = writeln!(s, "scene.{}.matched = {}", d.scene_id, d.matched);
        }
        s
    }
}

/// Evaluates predictions against groundtruth over every frame of every
/// scene. Both lists must cover the same scene IDs with the same frame
/// counts; scenes are reported in groundtruth order.
pub fn evaluate(predictions: &[SceneSegments], groundtruth: &[SceneSegments], thresholds: &[Scalar]) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &SceneSegments> = predictions.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let gt_ids: BTreeMap<&str, &SceneSegments> = groundtruth.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let mut unmatched: Vec<&str> = by_id.keys().filter(|k| !gt_ids.contains_key(*k)).copied().collect();
    unmatched.extend(gt_ids.keys().filter(|k| !by_id.contains_key(*k)).copied());
    if !unmatched.is_empty() {
        return Err(Error::Input(format!("unmatched scene IDs: {}", unmatched.join(", "))));
    }
    let mut frames = Vec::new();
    let mut owners = Vec::new();
    for (si, gt) in groundtruth.iter().enumerate() {
        let pred = by_id[gt.scene_id.as_str()];
        if pred.frames.len() != gt.frames.len() {
            return Err(Error::Input(format!(
                "scene {} has {} predicted frames and {} groundtruth frames",
                gt.scene_id,
                pred.frames.len(),
                gt.frames.len()
            )));
        }
        for (p, g) in pred.frames.iter().zip(&gt.frames) {
            frames.push(FrameEval {
                predictions: p,
                groundtruth: g,
            });
            owners.push(si);
        }
    }

    let mut entries = Vec::new();
    for &class_id in &EVAL_CLASSES {
        for &threshold in thresholds {
            entries.push(ClassThresholdEval {
                class_id,
                threshold,
                result: average_precision_frames(&frames, class_id, threshold)?,
            });
        }
    }
    let aps: Vec<Scalar> = entries.iter().filter_map(|e| e.result.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<Scalar>() / aps.len() as Scalar
    };

    let loosest = thresholds.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
    let scenes = groundtruth
        .iter()
        .enumerate()
        .map(|(si, gt)| {
            let own: Vec<FrameEval<'_>> = frames
                .iter()
                .zip(&owners)
                .filter(|(_, &o)| o == si)
                .map(|(f, _)| *f)
                .collect();
            let mut matched = 0;
            for &c in &EVAL_CLASSES {
                matched += average_precision_frames(&own, c, loosest)?.tp;
            }
            Ok(SceneDiagnostics {
                scene_id: gt.scene_id.clone(),
                predictions: own.iter().map(|f| f.predictions.len()).sum(),
                groundtruth: own.iter().map(|f| f.groundtruth.len()).sum(),
                matched,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        entries,
        map,
        scenes,
    })
}
