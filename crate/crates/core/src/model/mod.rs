//! The assembled two-stage detector: encoders, keypoint fusion, proposal
//! head and refinement head, with the training objective and inference.


use rand::Rng;
use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig, BackbonePlan};
use crate::detect::{
    assign_targets, decode_proposals, generate_anchors, rcnn_refine, roi_grid_pool, rpn_forward, sample_rois,
    AnchorSet, AnchorTargets, Detection, KeypointIndex, Proposal, ProposalConfig, RcnnHead, RoiSample, RoiSampling,
    RpnHead,
};
use crate::geometry::{decode_box, encode_box, nms, Box7, BoxDelta, GeometryError, IouKind};
use crate::losses::{
    focal_loss_batch, iou_confidence_loss, rpn_regression_loss, smooth_l1_batch, weighted_total, LossError,
    LossReport, LossWeights,
};
use crate::m3transformer::{AttentionConfig, M3Block};
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::pointcloud::{PointCloud, PointCloudError, PointMlp};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("scene has no points inside the detection range")]
    EmptyScene,
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    /// Per-class anchor size `(l, h, w)` and centre height.
    pub class_dims: Vec<[f64; 3]>,
    pub class_z: Vec<f64>,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    /// Initial foreground probability of every anchor.
    pub rpn_prior: f64,
    pub train_proposals: ProposalConfig,
    pub infer_proposals: ProposalConfig,
    pub roi_sampling: RoiSampling,
    pub grid_n: usize,
    pub roi_radius: f64,
    pub roi_max_neighbors: usize,
    pub roi_mlp: Vec<usize>,
    pub rcnn_hidden: usize,
    /// BEV NMS over refined boxes.
    pub final_nms: f64,
    pub score_threshold: f64,
    pub loss: LossWeights,
}

impl ModelConfig {
    pub fn n_classes(&self) -> usize {
        self.class_dims.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let a = &self.attention;
        if a.n_heads == 0 || a.d_model == 0 || a.d_model % a.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", a.d_model, a.n_heads));
        }
        if self.class_dims.is_empty() || self.class_dims.len() != self.class_z.len() {
            return bad("need matching, non-empty class_dims and class_z".into());
        }
        if self.class_dims.iter().flatten().any(|v| !(*v > 0.0)) {
            return bad("anchor dimensions must be positive".into());
        }
        if !(0.0 < self.rpn_neg_iou && self.rpn_neg_iou <= self.rpn_pos_iou && self.rpn_pos_iou <= 1.0) {
            return bad(format!("need 0 < neg_iou ≤ pos_iou ≤ 1, got {} / {}", self.rpn_neg_iou, self.rpn_pos_iou));
        }
        if !(0.0 < self.rpn_prior && self.rpn_prior < 1.0) {
            return bad(format!("rpn prior must lie in (0, 1), got {}", self.rpn_prior));
        }
        for (name, p) in [("train", &self.train_proposals), ("infer", &self.infer_proposals)] {
            if p.top_k == 0 || !(0.0..=1.0).contains(&p.nms_threshold) {
                return bad(format!("{name} proposals need top_k ≥ 1 and an NMS threshold in [0, 1]"));
            }
        }
        let r = &self.roi_sampling;
        if r.rois_per_scene == 0 || !(0.0..=1.0).contains(&r.fg_fraction) || !(r.iou_low < r.iou_high) {
            return bad("roi sampling needs rois ≥ 1, fg_fraction in [0, 1] and iou_low < iou_high".into());
        }
        if self.grid_n == 0 || self.roi_mlp.is_empty() || self.rcnn_hidden == 0 || !(self.roi_radius > 0.0) {
            return bad("roi grid, radius, mlp widths and hidden width must be positive".into());
        }
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub m3: M3Block,
    pub rpn: RpnHead,
    pub roi_mlp: PointMlp,
    pub rcnn: RcnnHead,
    pub anchors: AnchorSet,
}

/// Everything about one scene that does not depend on the parameters.
#[derive(Debug, Clone)]
pub struct ScenePlan {
    pub backbone: BackbonePlan,
    pub gts: Vec<(usize, Box7)>,
    pub anchor_targets: AnchorTargets,
}

/// Where second-stage boxes come from during training.
#[derive(Debug, Clone, PartialEq)]
pub enum ProposalSource {
    /// Decoded from the current proposal-head outputs.
    FromRpn,
    /// Fixed boxes, e.g. to keep the objective smooth for gradient checks.
    Injected(Vec<Proposal>),
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOutput {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
    pub iou: Var,
    pub refine: Var,
    pub num_positive: usize,
    pub num_rois: usize,
}

impl TrainOutput {
    pub fn report(&self, g: &Graph, w: &LossWeights) -> Result<LossReport, LossError> {
        crate::losses::total_loss(
            g.value(self.cls).item(),
            g.value(self.reg).item(),
            g.value(self.iou).item(),
            g.value(self.refine).item(),
            self.num_positive,
            w,
        )
    }
}

/// Intermediate per-scene values shared by training and inference.
struct Encoded {
    keypoints: Vec<[f64; 3]>,
    fused: Var,
    logits: Var,
    deltas: Var,
}

impl Model {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let backbone = Backbone::new(store, rng, config.backbone.clone())?;
        let widths = config.backbone.representation_widths();
        let m3 = M3Block::new(store, rng, "m3", &widths, config.attention)?;
        let c_t = m3.c_t();
        let bc = &config.backbone;
        let ext = bc.range.extents(bc.voxel_size).map(|e| e.div_ceil(8));
        let anchors = generate_anchors(
            ext[0],
            ext[1],
            [bc.range.min[0], bc.range.min[1]],
            backbone.bev_pixel_size(),
            &config.class_dims,
            &config.class_z,
        )?;
        let rpn = RpnHead::new(store, rng, "rpn", bc.bev_channels, config.n_classes(), anchors.per_pixel())?;
        rpn.set_prior(store, config.rpn_prior);
        let roi_mlp = PointMlp::new(store, rng, "roi_pool", c_t, true, &config.roi_mlp)?;
        let pooled = config.grid_n.pow(3) * roi_mlp.out_dim();
        let rcnn = RcnnHead::new(store, rng, "rcnn", pooled, config.rcnn_hidden)?;
        Ok(Self {
            config,
            backbone,
            m3,
            rpn,
            roi_mlp,
            rcnn,
            anchors,
        })
    }

    /// Residual-branch output projections of both transformer stages.
    pub fn residual_projections(&self) -> Vec<ParamId> {
        self.m3.residual_projections()
    }

    /// Zeroes and freezes both transformer stages' residual branches, leaving
    /// the fusion path as normalization only.
    pub fn disable_transformers(&self, store: &mut ParamStore) {
        for id in self.residual_projections() {
            store.value_mut(id).data_mut().fill(0.0);
            store.set_frozen(id, true);
        }
    }

    pub fn plan(&self, cloud: &PointCloud, gts: &[(usize, Box7)]) -> Result<ScenePlan, ModelError> {
        let backbone = self.backbone.plan(cloud)?;
        if backbone.keypoints.is_empty() {
            return Err(ModelError::EmptyScene);
        }
        let anchor_targets = assign_targets(&self.anchors, gts, self.config.rpn_pos_iou, self.config.rpn_neg_iou);
        Ok(ScenePlan {
            backbone,
            gts: gts.to_vec(),
            anchor_targets,
        })
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore, plan: &ScenePlan) -> Result<Encoded, ModelError> {
        let (features, bev) = self.backbone.forward(g, store, &plan.backbone)?;
        let fused = self.m3.forward(g, store, &features.representations())?.fused;
        let rpn = rpn_forward(g, store, &self.rpn, &bev)?;
        Ok(Encoded {
            keypoints: features.positions,
            fused,
            logits: rpn.logits,
            deltas: rpn.deltas,
        })
    }

    fn proposals(&self, g: &Graph, enc: &Encoded, config: &ProposalConfig) -> Vec<Proposal> {
        decode_proposals(g.value(enc.logits).data(), g.value(enc.deltas).data(), &self.anchors, config)
    }

    /// Pools fused keypoint features on each box's grid and runs the
    /// refinement head; `None` when there are no boxes.
    fn refine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &Encoded,
        boxes: &[Box7],
    ) -> Result<Option<crate::detect::RcnnOutput>, ModelError> {
        if boxes.is_empty() {
            return Ok(None);
        }
        let cfg = &self.config;
        let index = KeypointIndex::new(&enc.keypoints, cfg.roi_radius);
        let grouping = index.grouping(boxes, cfg.grid_n, cfg.roi_radius, cfg.roi_max_neighbors);
        let pooled = roi_grid_pool(g, store, &self.roi_mlp, enc.fused, &index, &grouping, cfg.grid_n.pow(3))?;
        Ok(Some(rcnn_refine(g, store, &self.rcnn, pooled)?))
    }

    /// Builds the weighted training objective for one scene.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        plan: &ScenePlan,
        source: &ProposalSource,
    ) -> Result<TrainOutput, ModelError> {
        let cfg = &self.config;
        let w = &cfg.loss;
        let enc = self.encode(g, store, plan)?;
        let targets = &plan.anchor_targets;
        let cls = focal_loss_batch(g, enc.logits, targets, &self.anchors.classes, w.alpha, w.gamma)?;
        let reg = rpn_regression_loss(g, enc.deltas, targets, w.smooth_l1_beta)?;

        let proposals = match source {
            ProposalSource::FromRpn => self.proposals(g, &enc, &cfg.train_proposals),
            ProposalSource::Injected(p) => p.clone(),
        };
        let gt_boxes: Vec<Box7> = plan.gts.iter().map(|(_, b)| *b).collect();
        let sample: RoiSample = sample_rois(&proposals, &gt_boxes, &cfg.roi_sampling);
        let (iou, refine) = match self.refine(g, store, &enc, &sample.proposals)? {
            None => {
                let z = g.constant(Tensor::scalar(0.0));
                (z, z)
            }
            Some(out) => {
                let iou = iou_confidence_loss(g, out.conf_logits, &sample.conf_targets)?;
                let mut rows = Vec::new();
                let mut deltas = Vec::new();
                for (i, m) in sample.matched.iter().enumerate() {
                    if let Some((gt, v)) = m {
                        if *v >= cfg.roi_sampling.fg_iou {
                            rows.push(i);
                            deltas.push(encode_box(&gt_boxes[*gt], &sample.proposals[i])?);
                        }
                    }
                }
                let refine = smooth_l1_batch(g, out.deltas, &rows, &deltas, w.smooth_l1_beta)?;
                (iou, refine)
            }
        };
        let total = weighted_total(g, cls, reg, iou, refine, w)?;
        Ok(TrainOutput {
            total,
            cls,
            reg,
            iou,
            refine,
            num_positive: targets.num_positive(),
            num_rois: sample.proposals.len(),
        })
    }

    /// First-stage proposals alone, with inference settings.
    pub fn propose(&self, store: &ParamStore, plan: &ScenePlan) -> Result<Vec<Proposal>, ModelError> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, store, plan)?;
        Ok(self.proposals(&g, &enc, &self.config.infer_proposals))
    }

    /// Proposals, refinement and the final NMS; detections in descending
    /// confidence.
    pub fn infer(&self, store: &ParamStore, plan: &ScenePlan) -> Result<Vec<Detection>, ModelError> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let enc = self.encode(&mut g, store, plan)?;
        let proposals = self.proposals(&g, &enc, &cfg.infer_proposals);
        let boxes: Vec<Box7> = proposals.iter().map(|p| p.bbox).collect();
        let Some(out) = self.refine(&mut g, store, &enc, &boxes)? else {
            return Ok(Vec::new());
        };
        let conf = g.sigmoid(out.conf_logits);
        let mut dets = Vec::new();
        for (i, p) in proposals.iter().enumerate() {
            let d: [f64; 7] = g.value(out.deltas).row(i).try_into().expect("seven deltas");
            let confidence = g.value(conf).get2(i, 0);
            if confidence < cfg.score_threshold {
                continue;
            }
            if let Ok(bbox) = decode_box(&BoxDelta::from_array(d), &p.bbox) {
                dets.push(Detection {
                    class: p.class,
                    bbox,
                    confidence,
                });
            }
        }
        let pairs: Vec<(Box7, f64)> = dets.iter().map(|d| (d.bbox, d.confidence)).collect();
        Ok(nms(&pairs, cfg.final_nms, IouKind::Bev).into_iter().map(|i| dets[i]).collect())
    }
}
