//! Detection metrics: greedy matching, precision–recall curves,
//! interpolated AP at 11 or 40 recall positions, KITTI difficulty buckets
//! and point-count levels with heading-weighted AP.


use std::fmt;

use thiserror::Error;

use crate::detect::Detection;
use crate::geometry::{wrap_angle, Box7, IouKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("average precision is undefined without ground truth")]
    NoGroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Easy => "easy",
            Self::Moderate => "moderate",
            Self::Hard => "hard",
            Self::Ignored => "ignored",
        })
    }
}

/// Image-height / occlusion / truncation limits of one difficulty bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyRule {
    pub min_height_px: f64,
    pub max_occlusion: u8,
    pub max_truncation: f64,
}

/// The public KITTI table, easiest bucket first.
pub const KITTI_DIFFICULTY: [(Difficulty, DifficultyRule); 3] = [
    (
        Difficulty::Easy,
        DifficultyRule {
            min_height_px: 40.0,
            max_occlusion: 0,
            max_truncation: 0.15,
        },
    ),
    (
        Difficulty::Moderate,
        DifficultyRule {
            min_height_px: 25.0,
            max_occlusion: 1,
            max_truncation: 0.30,
        },
    ),
    (
        Difficulty::Hard,
        DifficultyRule {
            min_height_px: 25.0,
            max_occlusion: 2,
            max_truncation: 0.50,
        },
    ),
];

/// Easiest bucket whose limits the annotation satisfies.
pub fn kitti_difficulty(height_px: f64, occlusion: u8, truncation: f64) -> Difficulty {
    KITTI_DIFFICULTY
        .iter()
        .find(|(_, r)| height_px >= r.min_height_px && occlusion <= r.max_occlusion && truncation <= r.max_truncation)
        .map_or(Difficulty::Ignored, |(d, _)| *d)
}

/// Point-count levels: `Level1` keeps boxes with more than 5 LiDAR points,
/// `Level2` those with more than 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Level1,
    Level2,
}

impl Level {
    pub fn min_points_exclusive(&self) -> usize {
        match self {
            Self::Level1 => 5,
            Self::Level2 => 1,
        }
    }

    pub fn admits(&self, points_inside: usize) -> bool {
        points_inside > self.min_points_exclusive()
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Level1 => "LEVEL_1",
            Self::Level2 => "LEVEL_2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: Box7,
    pub class: usize,
    pub points_inside: usize,
    pub difficulty: Difficulty,
}

/// Which ground truths count. The rest become don't-care: detections
/// matching them are neither true nor false positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Subset {
    All,
    Level(Level),
    /// Buckets up to and including this one.
    Difficulty(Difficulty),
}

impl Subset {
    pub fn admits(&self, gt: &GroundTruthBox) -> bool {
        match self {
            Self::All => true,
            Self::Level(l) => l.admits(gt.points_inside),
            Self::Difficulty(d) => gt.difficulty != Difficulty::Ignored && gt.difficulty <= *d,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Level(l) => l.fmt(f),
            Self::Difficulty(d) => d.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Matched ground-truth index per detection (input order).
    pub det_match: Vec<Option<usize>>,
    /// Detections that landed on a don't-care ground truth.
    pub det_ignored: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn is_tp(&self, det: usize) -> bool {
        self.det_match[det].is_some()
    }
}

/// Greedy matching without don't-care ground truths.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_threshold: f64, kind: IouKind) -> MatchResult {
    match_with_care(dets, gts, &vec![true; gts.len()], iou_threshold, kind)
}

/// Detections are visited by descending confidence (ties by input order);
/// each claims the highest-IoU unmatched cared-for ground truth of its
/// class when that IoU reaches the threshold. Otherwise it is flagged as
/// ignored if it reaches the threshold on a don't-care box.
pub fn match_with_care(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    care: &[bool],
    iou_threshold: f64,
    kind: IouKind,
) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut out = MatchResult {
        det_match: vec![None; dets.len()],
        det_ignored: vec![false; dets.len()],
        gt_matched: vec![false; gts.len()],
    };
    for d in order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        let mut hits_dont_care = false;
        for (i, gt) in gts.iter().enumerate() {
            if gt.class != det.class {
                continue;
            }
            let iou = kind.eval(&det.bbox, &gt.bbox);
            if iou < iou_threshold {
                continue;
            }
            if !care[i] {
                hits_dont_care = true;
            } else if !out.gt_matched[i] && best.is_none_or(|(_, b)| iou > b) {
                best = Some((i, iou));
            }
        }
        match best {
            Some((i, _)) => {
                out.gt_matched[i] = true;
                out.det_match[d] = Some(i);
            }
            None => out.det_ignored[d] = hits_dont_care,
        }
    }
    out
}

/// One scored detection outcome; `weight` is the credit a true positive
/// earns (1 for plain AP, the heading score for the heading-weighted one).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub score: f64,
    pub tp: bool,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub events: Vec<Event>,
    pub num_gt: usize,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    /// Sweeps the score threshold downward. Recall counts matched ground
    /// truths; precision credits each true positive with its weight.
    pub fn from_events(mut events: Vec<Event>, num_gt: usize) -> Self {
        events.sort_by(|a, b| b.score.total_cmp(&a.score));
        let (mut tp, mut credit, mut n) = (0usize, 0.0, 0usize);
        let mut precision = Vec::with_capacity(events.len());
        let mut recall = Vec::with_capacity(events.len());
        for e in &events {
            n += 1;
            if e.tp {
                tp += 1;
                credit += e.weight;
            }
            precision.push(credit / n as f64);
            recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
        }
        Self {
            events,
            num_gt,
            precision,
            recall,
        }
    }

    /// Highest precision at recall ≥ `r`; 0 when `r` is never reached.
    pub fn interpolated_precision(&self, r: f64) -> f64 {
        // recall values are ratios of small integers; the slack absorbs the
        // last-bit disagreement between tp/n and k/40
        self.recall
            .iter()
            .zip(&self.precision)
            .filter(|(rec, _)| **rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max)
    }

    /// (recall, precision) pairs for plotting.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.recall.iter().copied().zip(self.precision.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ApMode {
    /// Recall positions 0, 0.1, …, 1.
    R11,
    /// Recall positions 1/40, 2/40, …, 1.
    R40,
}

impl ApMode {
    pub fn recall_positions(&self) -> Vec<f64> {
        match self {
            Self::R11 => (0..=10).map(|k| k as f64 / 10.0).collect(),
            Self::R40 => (1..=40).map(|k| k as f64 / 40.0).collect(),
        }
    }
}

impl fmt::Display for ApMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::R11 => "R11",
            Self::R40 => "R40",
        })
    }
}

pub fn average_precision(curve: &PrCurve, mode: ApMode) -> Result<f64, EvalError> {
    if curve.num_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let positions = mode.recall_positions();
    Ok(positions.iter().map(|&r| curve.interpolated_precision(r)).sum::<f64>() / positions.len() as f64)
}

/// `1 − |Δθ|/π` with the difference wrapped to `[-π, π)`, clipped to `[0, 1]`.
pub fn heading_weight(pred: f64, gt: f64) -> f64 {
    (1.0 - wrap_angle(pred - gt).abs() / std::f64::consts::PI).clamp(0.0, 1.0)
}

/// One frame's detections and annotations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthBox>,
}

/// Optional BEV distance band `[near, far)` measured from the sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeBand {
    pub near: f64,
    pub far: f64,
}

impl RangeBand {
    pub fn contains(&self, b: &Box7) -> bool {
        let d = b.x.hypot(b.y);
        d >= self.near && d < self.far
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalQuery {
    pub class: usize,
    pub iou_threshold: f64,
    pub kind: IouKind,
    pub subset: Subset,
    pub range: Option<RangeBand>,
}

/// Plain and heading-weighted curves for one class over many scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCurves {
    pub plain: PrCurve,
    pub heading: PrCurve,
}

pub fn class_curves(scenes: &[SceneEval], q: &EvalQuery) -> ClassCurves {
    let mut plain = Vec::new();
    let mut heading = Vec::new();
    let mut num_gt = 0;
    for scene in scenes {
        let gts: Vec<GroundTruthBox> = scene.ground_truth.iter().filter(|g| g.class == q.class).copied().collect();
        let in_band = |b: &Box7| q.range.is_none_or(|r| r.contains(b));
        let care: Vec<bool> = gts.iter().map(|g| q.subset.admits(g) && in_band(&g.bbox)).collect();
        num_gt += care.iter().filter(|c| **c).count();
        let dets: Vec<Detection> = scene
            .detections
            .iter()
            .filter(|d| d.class == q.class && in_band(&d.bbox))
            .copied()
            .collect();
        let m = match_with_care(&dets, &gts, &care, q.iou_threshold, q.kind);
        for (i, d) in dets.iter().enumerate() {
            if m.det_ignored[i] {
                continue;
            }
            let (tp, w) = match m.det_match[i] {
                Some(g) => (true, heading_weight(d.bbox.theta, gts[g].bbox.theta)),
                None => (false, 0.0),
            };
            plain.push(Event {
                score: d.confidence,
                tp,
                weight: 1.0,
            });
            heading.push(Event {
                score: d.confidence,
                tp,
                weight: w,
            });
        }
    }
    ClassCurves {
        plain: PrCurve::from_events(plain, num_gt),
        heading: PrCurve::from_events(heading, num_gt),
    }
}

/// Mean AP and heading-weighted AP over `classes`, skipping classes without
/// ground truth in the subset. Fails if every class is empty.
pub fn map_with_heading(
    scenes: &[SceneEval],
    classes: &[usize],
    iou_threshold: &dyn Fn(usize) -> f64,
    kind: IouKind,
    subset: Subset,
    mode: ApMode,
) -> Result<(f64, f64), EvalError> {
    let mut sum = (0.0, 0.0);
    let mut n = 0;
    for &class in classes {
        let c = class_curves(
            scenes,
            &EvalQuery {
                class,
                iou_threshold: iou_threshold(class),
                kind,
                subset,
                range: None,
            },
        );
        if c.plain.num_gt == 0 {
            continue;
        }
        sum.0 += average_precision(&c.plain, mode)?;
        sum.1 += average_precision(&c.heading, mode)?;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    Ok((sum.0 / n as f64, sum.1 / n as f64))
}
