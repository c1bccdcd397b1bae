use rand::Rng;

use super::AnchorSet;
use crate::backbone::BevMap;
use crate::geometry::{decode_box, nms, Box7, BoxDelta, IouKind};
use crate::layers::{Init, Linear};
use crate::numerics::{Graph, NumericsError, ParamStore, Var};

/// 1×1 convolution heads over the BEV map.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHead {
    pub cls: Linear,
    pub reg: Linear,
    pub n_classes: usize,
    pub anchors_per_pixel: usize,
}

/// Anchor-aligned head outputs.
#[derive(Debug, Clone, Copy)]
pub struct RpnOutput {
    /// `[anchors × n_classes]`.
    pub logits: Var,
    /// `[anchors × 7]`.
    pub deltas: Var,
}

impl RpnHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_bev: usize,
        n_classes: usize,
        anchors_per_pixel: usize,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            cls: Linear::new(store, rng, &format!("{name}.cls"), c_bev, anchors_per_pixel * n_classes, true, Init::FanIn)?,
            reg: Linear::new(store, rng, &format!("{name}.reg"), c_bev, anchors_per_pixel * 7, true, Init::FanIn)?,
            n_classes,
            anchors_per_pixel,
        })
    }

    /// Sets the classification bias so every initial score equals `prior`.
    pub fn set_prior(&self, store: &mut ParamStore, prior: f64) {
        if let Some(b) = self.cls.bias {
            let v = -((1.0 - prior) / prior).ln();
            store.value_mut(b).data_mut().fill(v);
        }
    }
}

pub fn rpn_forward(g: &mut Graph, store: &ParamStore, head: &RpnHead, bev: &BevMap) -> Result<RpnOutput, NumericsError> {
    let pixels = bev.rows * bev.cols;
    let a = pixels * head.anchors_per_pixel;
    let logits = head.cls.forward(g, store, bev.features)?;
    let logits = g.reshape(logits, &[a, head.n_classes])?;
    let deltas = head.reg.forward(g, store, bev.features)?;
    let deltas = g.reshape(deltas, &[a, 7])?;
    Ok(RpnOutput { logits, deltas })
}

/// A candidate box passed to the second stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: Box7,
    pub objectness: f64,
    pub class: usize,
    pub anchor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    /// Highest-scoring anchors considered before NMS.
    pub pre_nms: usize,
    pub top_k: usize,
    pub nms_threshold: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scores anchors by their best class probability, decodes the highest
/// `pre_nms`, suppresses overlaps in BEV and keeps at most `top_k`.
/// Anchors whose deltas do not decode to a valid box are skipped.
pub fn decode_proposals(
    logits: &[f64],
    deltas: &[f64],
    anchors: &AnchorSet,
    config: &ProposalConfig,
) -> Vec<Proposal> {
    let nc = anchors.n_classes.max(1);
    let mut scored: Vec<(usize, usize, f64)> = (0..anchors.len())
        .map(|a| {
            let row = &logits[a * nc..(a + 1) * nc];
            let (c, l) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &l)| if l > best.1 { (c, l) } else { best });
            (a, c, sigmoid(l))
        })
        .collect();
    scored.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));
    scored.truncate(config.pre_nms.max(config.top_k));
    let mut cands = Vec::with_capacity(scored.len());
    for (a, c, s) in scored {
        let d: [f64; 7] = deltas[a * 7..(a + 1) * 7].try_into().expect("seven deltas");
        if let Ok(b) = decode_box(&BoxDelta::from_array(d), &anchors.boxes[a]) {
            cands.push(Proposal {
                bbox: b,
                objectness: s,
                class: c,
                anchor: a,
            });
        }
    }
    let pairs: Vec<(Box7, f64)> = cands.iter().map(|p| (p.bbox, p.objectness)).collect();
    let keep = nms(&pairs, config.nms_threshold, IouKind::Bev);
    keep.into_iter().take(config.top_k).map(|i| cands[i]).collect()
}
