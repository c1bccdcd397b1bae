//! Two-stage detection heads: anchors and RPN over the BEV map, proposal
//! selection, RoI-grid pooling of fused keypoint features and refinement.

mod anchors;
mod roi;
mod rpn;

#[cfg(test)]
mod tests;

pub use anchors::{assign_targets, class_statistics, generate_anchors, AnchorLabel, AnchorSet, AnchorTargets, ANCHOR_YAWS};
pub use roi::{iou_confidence_target, rcnn_refine, roi_grid_points, roi_grid_pool, KeypointIndex, RcnnHead, RcnnOutput};
pub use rpn::{decode_proposals, rpn_forward, Proposal, ProposalConfig, RpnHead, RpnOutput};

use crate::geometry::{iou_3d, Box7};

/// A final, refined detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub bbox: Box7,
    pub confidence: f64,
}

/// Proposals chosen for second-stage training with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSample {
    pub proposals: Vec<Box7>,
    /// Best-overlapping ground truth and its 3D IoU, per proposal.
    pub matched: Vec<Option<(usize, f64)>>,
    pub conf_targets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSampling {
    pub rois_per_scene: usize,
    pub fg_fraction: f64,
    /// 3D IoU from which a proposal counts as foreground and gets a
    /// regression target.
    pub fg_iou: f64,
    pub iou_low: f64,
    pub iou_high: f64,
    /// Ground-truth boxes are added as proposals so early training always
    /// has foreground examples.
    pub include_gt: bool,
}

/// Deterministic foreground/background split: foreground proposals in
/// score order up to the quota, then the rest in score order.
pub fn sample_rois(proposals: &[Proposal], gts: &[Box7], cfg: &RoiSampling) -> RoiSample {
    let mut boxes: Vec<Box7> = proposals.iter().map(|p| p.bbox).collect();
    if cfg.include_gt {
        boxes.extend_from_slice(gts);
    }
    let best = |b: &Box7| -> Option<(usize, f64)> {
        gts.iter()
            .enumerate()
            .map(|(i, gt)| (i, iou_3d(b, gt)))
            .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            })
    };
    let scored: Vec<(Box7, Option<(usize, f64)>)> = boxes.iter().map(|b| (*b, best(b))).collect();
    let is_fg = |m: &Option<(usize, f64)>| m.is_some_and(|(_, v)| v >= cfg.fg_iou);
    let fg_quota = ((cfg.rois_per_scene as f64) * cfg.fg_fraction).round() as usize;
    let mut chosen: Vec<usize> = (0..scored.len()).filter(|&i| is_fg(&scored[i].1)).take(fg_quota).collect();
    let bg_quota = cfg.rois_per_scene.saturating_sub(chosen.len());
    chosen.extend((0..scored.len()).filter(|&i| !is_fg(&scored[i].1)).take(bg_quota));
    chosen.sort_unstable();
    let mut out = RoiSample {
        proposals: Vec::new(),
        matched: Vec::new(),
        conf_targets: Vec::new(),
    };
    for i in chosen {
        let (b, m) = scored[i];
        out.proposals.push(b);
        out.matched.push(m);
        out.conf_targets.push(iou_confidence_target(&b, gts, cfg.iou_low, cfg.iou_high));
    }
    out
}
