use super::{Box7, IouKind};

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score (ties: lower index first); a
/// candidate is dropped when its IoU with an already kept box exceeds
/// `iou_threshold`. Returns kept indices in visiting order.
pub fn nms(boxes: &[(Box7, f64)], iou_threshold: f64, kind: IouKind) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].1.total_cmp(&boxes[i].1).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| kind.eval(&boxes[k].0, &boxes[i].0) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
