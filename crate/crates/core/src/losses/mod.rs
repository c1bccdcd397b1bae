//! Detection losses: sigmoid focal classification, smooth-L1 box
//! regression, IoU-guided confidence, and their weighted total.
//!
//! Each loss has a scalar form (one prediction) and a graph form (a batch,
//! differentiable, reduced to a `[1]` tensor).


use thiserror::Error;

use crate::detect::{AnchorLabel, AnchorTargets};
use crate::geometry::BoxDelta;
use crate::numerics::{Graph, NumericsError, Tensor, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss weight {name} must be finite and nonnegative, got {value}")]
    Weight { name: &'static str, value: f64 },
    #[error("{0} loss is not finite")]
    NonFinite(&'static str),
    #[error("{what}: expected {expected} rows, got {got}")]
    Rows {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta_reg: f64,
    pub beta_iou: f64,
    pub beta_ref: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Quadratic-to-linear switch point of the smooth-L1 terms.
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_reg: 2.0,
            beta_iou: 1.0,
            beta_ref: 1.0,
            alpha: 0.25,
            gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("beta_reg", self.beta_reg),
            ("beta_iou", self.beta_iou),
            ("beta_ref", self.beta_ref),
            ("alpha", self.alpha),
            ("gamma", self.gamma),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LossError::Weight { name, value });
            }
        }
        if !(self.alpha <= 1.0) {
            return Err(LossError::Weight {
                name: "alpha",
                value: self.alpha,
            });
        }
        if !(self.smooth_l1_beta.is_finite() && self.smooth_l1_beta > 0.0) {
            return Err(LossError::Weight {
                name: "smooth_l1_beta",
                value: self.smooth_l1_beta,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_iou: f64,
    pub l_ref: f64,
    pub total: f64,
    pub num_positive: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_cls,l_reg,l_iou,l_ref,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.l_cls, self.l_reg, self.l_iou, self.l_ref, self.total
        )
    }
}

/// `−α_a (1 − p)^γ ln p` where `p` is the probability given to the
/// assigned outcome.
pub fn focal_loss(p: f64, alpha_a: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -alpha_a * (1.0 - p).powf(gamma) * p.ln()
}

pub fn smooth_l1_scalar(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

/// Smooth-L1 summed over the seven residual coordinates.
pub fn smooth_l1(pred: &BoxDelta, target: &BoxDelta, beta: f64) -> f64 {
    pred.to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| smooth_l1_scalar(p - t, beta))
        .sum()
}

/// Binary cross-entropy of a predicted probability against a soft target.
pub fn bce(pred: f64, target: f64) -> f64 {
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Weighted total; fails naming the first non-finite component.
pub fn total_loss(
    l_cls: f64,
    l_reg: f64,
    l_iou: f64,
    l_ref: f64,
    num_positive: usize,
    w: &LossWeights,
) -> Result<LossReport, LossError> {
    for (name, v) in [("cls", l_cls), ("reg", l_reg), ("iou", l_iou), ("ref", l_ref)] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    Ok(LossReport {
        l_cls,
        l_reg,
        l_iou,
        l_ref,
        total: l_cls + w.beta_reg * l_reg + w.beta_iou * l_iou + w.beta_ref * l_ref,
        num_positive,
    })
}

fn check_rows(g: &Graph, v: Var, expected: usize, what: &'static str) -> Result<(), LossError> {
    let got = g.shape(v).first().copied().unwrap_or(0);
    if got != expected {
        return Err(LossError::Rows { what, expected, got });
    }
    Ok(())
}

/// Sigmoid focal loss over anchor logits `[A × n_cls]`. A positive anchor
/// targets its own class column; every other entry of a non-ignored anchor
/// targets 0. Ignored anchors contribute nothing. The sum is divided by
/// `max(1, positives)`.
pub fn focal_loss_batch(
    g: &mut Graph,
    logits: Var,
    targets: &AnchorTargets,
    anchor_classes: &[usize],
    alpha: f64,
    gamma: f64,
) -> Result<Var, LossError> {
    let a = targets.labels.len();
    check_rows(g, logits, a, "classification logits")?;
    let nc = g.shape(logits).get(1).copied().unwrap_or(1);
    // p_t = offset + sign·p, weight = −α_t for kept entries, 0 otherwise
    let mut offset = vec![1.0; a * nc];
    let mut sign = vec![-1.0; a * nc];
    let mut weight = vec![0.0; a * nc];
    for (i, label) in targets.labels.iter().enumerate() {
        if *label == AnchorLabel::Ignore {
            continue;
        }
        for c in 0..nc {
            let k = i * nc + c;
            let positive = *label == AnchorLabel::Positive && anchor_classes[i] == c;
            if positive {
                offset[k] = 0.0;
                sign[k] = 1.0;
            }
            weight[k] = -(if positive { alpha } else { 1.0 - alpha });
        }
    }
    let shape = vec![a, nc];
    let p = g.sigmoid(logits);
    let sign = g.constant(Tensor::new(shape.clone(), sign)?);
    let offset = g.constant(Tensor::new(shape.clone(), offset)?);
    let weight = g.constant(Tensor::new(shape, weight)?);
    let signed = g.mul(p, sign)?;
    let pt = g.add(signed, offset)?;
    let pt = g.clamp(pt, PROB_EPS, 1.0 - PROB_EPS);
    let log_pt = g.log(pt)?;
    let one_minus = g.scale(pt, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let modulator = g.pow_scalar(one_minus, gamma);
    let per = g.mul(modulator, log_pt)?;
    let per = g.mul(per, weight)?;
    let sum = g.sum_all(per)?;
    Ok(g.scale(sum, 1.0 / targets.num_positive().max(1) as f64))
}

/// Smooth-L1 between selected prediction rows of `deltas` `[R × 7]` and
/// their targets, summed over coordinates and averaged over the selection
/// (floor 1).
pub fn smooth_l1_batch(
    g: &mut Graph,
    deltas: Var,
    rows: &[usize],
    targets: &[BoxDelta],
    beta: f64,
) -> Result<Var, LossError> {
    debug_assert_eq!(rows.len(), targets.len());
    let picked = g.gather_rows(deltas, rows.to_vec())?;
    let data: Vec<f64> = targets.iter().flat_map(|t| t.to_array()).collect();
    let target = g.constant(Tensor::new(vec![rows.len(), 7], data)?);
    let diff = g.sub(picked, target)?;
    let per = g.smooth_l1(diff, beta);
    let sum = g.sum_all(per)?;
    Ok(g.scale(sum, 1.0 / rows.len().max(1) as f64))
}

/// RPN regression over positive anchors.
pub fn rpn_regression_loss(g: &mut Graph, deltas: Var, targets: &AnchorTargets, beta: f64) -> Result<Var, LossError> {
    check_rows(g, deltas, targets.labels.len(), "anchor deltas")?;
    let rows: Vec<usize> = (0..targets.labels.len())
        .filter(|&i| targets.labels[i] == AnchorLabel::Positive)
        .collect();
    let t: Vec<BoxDelta> = rows.iter().map(|&i| targets.deltas[i]).collect();
    smooth_l1_batch(g, deltas, &rows, &t, beta)
}

/// Mean BCE between `sigmoid(conf_logits)` `[P × 1]` and soft targets.
pub fn iou_confidence_loss(g: &mut Graph, conf_logits: Var, targets: &[f64]) -> Result<Var, LossError> {
    let n = targets.len();
    check_rows(g, conf_logits, n, "confidence logits")?;
    let p = g.sigmoid(conf_logits);
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let q = g.scale(p, -1.0);
    let q = g.add_scalar(q, 1.0);
    let log_p = g.log(p)?;
    let log_q = g.log(q)?;
    let t = g.constant(Tensor::new(vec![n, 1], targets.to_vec())?);
    let u = g.constant(Tensor::new(vec![n, 1], targets.iter().map(|t| 1.0 - t).collect())?);
    let a = g.mul(log_p, t)?;
    let b = g.mul(log_q, u)?;
    let s = g.add(a, b)?;
    let sum = g.sum_all(s)?;
    Ok(g.scale(sum, -1.0 / n.max(1) as f64))
}

/// Graph form of [`total_loss`]: `cls + β_reg·reg + β_iou·iou + β_ref·ref`.
pub fn weighted_total(g: &mut Graph, cls: Var, reg: Var, iou: Var, refine: Var, w: &LossWeights) -> Result<Var, LossError> {
    let reg = g.scale(reg, w.beta_reg);
    let iou = g.scale(iou, w.beta_iou);
    let refine = g.scale(refine, w.beta_ref);
    let t = g.add(cls, reg)?;
    let t = g.add(t, iou)?;
    Ok(g.add(t, refine)?)
}
