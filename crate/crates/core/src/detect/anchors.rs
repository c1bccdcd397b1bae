use std::f64::consts::FRAC_PI_2;

use crate::geometry::{encode_box, iou_bev, Box7, BoxDelta, GeometryError};

/// Anchor yaws placed at every BEV pixel for every class.
pub const ANCHOR_YAWS: [f64; 2] = [0.0, FRAC_PI_2];

/// Anchors laid over the BEV raster. Anchor `(p·n_classes + c)·2 + y` sits at
/// pixel `p = i·cols + j` with class `c` and yaw `ANCHOR_YAWS[y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<Box7>,
    pub classes: Vec<usize>,
    pub n_classes: usize,
    pub rows: usize,
    pub cols: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn per_pixel(&self) -> usize {
        self.n_classes * ANCHOR_YAWS.len()
    }
}

/// `class_dims[c] = (l, h, w)`; `z_centers[c]` is the anchor height centre.
pub fn generate_anchors(
    rows: usize,
    cols: usize,
    origin: [f64; 2],
    pixel_size: [f64; 2],
    class_dims: &[[f64; 3]],
    z_centers: &[f64],
) -> Result<AnchorSet, GeometryError> {
    let n_classes = class_dims.len();
    let mut boxes = Vec::with_capacity(rows * cols * n_classes * 2);
    let mut classes = Vec::with_capacity(boxes.capacity());
    for i in 0..rows {
        for j in 0..cols {
            let x = origin[0] + (i as f64 + 0.5) * pixel_size[0];
            let y = origin[1] + (j as f64 + 0.5) * pixel_size[1];
            for (c, dims) in class_dims.iter().enumerate() {
                let z = z_centers.get(c).copied().unwrap_or(0.0);
                for yaw in ANCHOR_YAWS {
                    boxes.push(Box7::new(x, y, z, dims[0], dims[1], dims[2], yaw)?);
                    classes.push(c);
                }
            }
        }
    }
    Ok(AnchorSet {
        boxes,
        classes,
        n_classes,
        rows,
        cols,
    })
}

/// Per-class mean `(l, h, w)` and mean centre height; classes without
/// examples fall back to `fallback`.
pub fn class_statistics(
    gts: &[(usize, Box7)],
    n_classes: usize,
    fallback: ([f64; 3], f64),
) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut sums = vec![[0.0; 4]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (c, b) in gts {
        if *c < n_classes {
            let s = &mut sums[*c];
            s[0] += b.l;
            s[1] += b.h;
            s[2] += b.w;
            s[3] += b.z;
            counts[*c] += 1;
        }
    }
    let mut dims = Vec::with_capacity(n_classes);
    let mut z = Vec::with_capacity(n_classes);
    for (s, &n) in sums.iter().zip(&counts) {
        if n == 0 {
            dims.push(fallback.0);
            z.push(fallback.1);
        } else {
            let n = n as f64;
            dims.push([s[0] / n, s[1] / n, s[2] / n]);
            z.push(s[3] / n);
        }
    }
    (dims, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Training targets of every anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
    /// Ground-truth index for positives.
    pub matched: Vec<Option<usize>>,
    /// Regression targets (zero for non-positives).
    pub deltas: Vec<BoxDelta>,
}

impl AnchorTargets {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l == AnchorLabel::Positive).count()
    }
}

/// Labels anchors by BEV IoU with same-class ground truth: positive at
/// `≥ pos_iou`, negative below `neg_iou`, ignored in between. Additionally
/// the best anchor of every ground truth (ties: lowest index) becomes a
/// positive matched to it whenever that IoU is non-zero; later ground
/// truths take precedence when they share a best anchor.
pub fn assign_targets(anchors: &AnchorSet, gts: &[(usize, Box7)], pos_iou: f64, neg_iou: f64) -> AnchorTargets {
    let a = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; a];
    let mut matched = vec![None; a];
    let mut deltas = vec![BoxDelta::default(); a];
    if gts.is_empty() {
        return AnchorTargets {
            labels,
            matched,
            deltas,
        };
    }
    let mut best_anchor = vec![(0usize, 0.0f64); gts.len()];
    for (ai, anchor) in anchors.boxes.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gc, gt)) in gts.iter().enumerate() {
            if *gc != anchors.classes[ai] {
                continue;
            }
            let iou = iou_bev(anchor, gt);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
            if iou > best_anchor[gi].1 {
                best_anchor[gi] = (ai, iou);
            }
        }
        let (gi, iou) = best.unwrap_or((0, 0.0));
        if iou >= pos_iou && best.is_some() {
            labels[ai] = AnchorLabel::Positive;
            matched[ai] = Some(gi);
        } else if iou >= neg_iou {
            labels[ai] = AnchorLabel::Ignore;
        }
    }
    for (gi, &(ai, iou)) in best_anchor.iter().enumerate() {
        if iou > 0.0 {
            labels[ai] = AnchorLabel::Positive;
            matched[ai] = Some(gi);
        }
    }
    for ai in 0..a {
        if let Some(gi) = matched[ai] {
            deltas[ai] = encode_box(&gts[gi].1, &anchors.boxes[ai]).expect("validated boxes");
        }
    }
    AnchorTargets {
        labels,
        matched,
        deltas,
    }
}
