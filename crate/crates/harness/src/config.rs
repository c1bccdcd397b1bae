//! Pipeline configuration: one TOML document, validated on load.

use std::path::Path;

use m3fuse_core::backbone::BackboneConfig;
use m3fuse_core::detect::{ProposalConfig, RoiSampling};
use m3fuse_core::eval::ApMode;
use m3fuse_core::geometry::IouKind;
use m3fuse_core::losses::LossWeights;
use m3fuse_core::m3transformer::{AttentionConfig, LogitScale};
use m3fuse_core::model::ModelConfig;
use m3fuse_core::pointcloud::Bounds;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub range: RangeSection,
    pub backbone: BackboneSection,
    pub transformer: TransformerSection,
    pub anchors: AnchorSection,
    pub proposals: ProposalSection,
    pub roi: RoiSection,
    pub detection: DetectionSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub synth: SynthSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSection {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub voxel_size: [f64; 3],
    pub voxel_channels: [usize; 4],
    pub bev_channels: usize,
    pub bev_blocks: usize,
    pub point_channels: usize,
    pub point_radius: f64,
    /// Empty means twice the voxel diagonal of each scale.
    #[serde(default)]
    pub vsa_radii: Vec<f64>,
    pub max_neighbors: usize,
    pub num_keypoints: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitScaleName {
    InputWidth,
    KeyWidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSection {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub logit_scale: LogitScaleName,
    /// Zero and freeze both stages' residual branches.
    #[serde(default)]
    pub disabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSection {
    pub class_names: Vec<String>,
    /// `(l, h, w)` per class.
    pub class_dims: Vec<[f64; 3]>,
    pub class_z: Vec<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub prior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalSection {
    pub pre_nms: usize,
    pub train_top_k: usize,
    pub train_nms: f64,
    pub infer_top_k: usize,
    pub infer_nms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSection {
    pub grid_n: usize,
    pub radius: f64,
    pub max_neighbors: usize,
    pub mlp: Vec<usize>,
    pub hidden: usize,
    pub per_scene: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub iou_low: f64,
    pub iou_high: f64,
    pub include_gt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSection {
    pub final_nms: f64,
    pub score_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub beta_reg: f64,
    pub beta_iou: f64,
    pub beta_ref: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub smooth_l1_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Scenes whose gradients are summed into one step.
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_fraction: f64,
    /// Final learning rate is `peak_lr / final_div`.
    pub final_div: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub clutter_points: usize,
    /// Object points per cubic metre (at least 8 per object).
    pub point_density: f64,
    /// Share of objects emitted with only 2–5 points.
    pub sparse_fraction: f64,
    /// Relative jitter of object dimensions around the class size.
    pub size_jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouKindName {
    Bev,
    ThreeD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApModeName {
    R11,
    R40,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Matching threshold per class (same order as `anchors.class_names`).
    pub iou_thresholds: Vec<f64>,
    pub iou_kind: IouKindName,
    pub ap_modes: Vec<ApModeName>,
}

impl From<IouKindName> for IouKind {
    fn from(k: IouKindName) -> Self {
        match k {
            IouKindName::Bev => IouKind::Bev,
            IouKindName::ThreeD => IouKind::ThreeD,
        }
    }
}

impl From<ApModeName> for ApMode {
    fn from(m: ApModeName) -> Self {
        match m {
            ApModeName::R11 => ApMode::R11,
            ApModeName::R40 => ApMode::R40,
        }
    }
}

/// Small enough for the whole suite to run on one core in minutes.
pub const DESK_TOML: &str = include_str!("../../../configs/desk.toml");
/// Full-scale constants, kept for reference runs.
pub const KITTI_TOML: &str = include_str!("../../../configs/kitti-full.toml");

impl PipelineConfig {
    pub fn desk() -> Self {
        Self::from_toml(DESK_TOML).expect("bundled desk config is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Validation(m));
        let b = &self.backbone;
        if b.vsa_radii.len() != 0 && b.vsa_radii.len() != 4 {
            return bad(format!("backbone.vsa_radii needs 0 or 4 entries, got {}", b.vsa_radii.len()));
        }
        if b.vsa_radii.iter().any(|r| !(*r > 0.0)) || !(b.point_radius > 0.0) {
            return bad("backbone radii must be positive".into());
        }
        if b.voxel_channels.contains(&0) || b.bev_channels == 0 || b.point_channels == 0 {
            return bad("backbone widths must be positive".into());
        }
        if b.num_keypoints == 0 || b.max_neighbors == 0 || b.bev_blocks == 0 {
            return bad("num_keypoints, max_neighbors and bev_blocks must be positive".into());
        }
        if self.anchors.class_names.len() != self.anchors.class_dims.len() {
            return bad("anchors.class_names and anchors.class_dims differ in length".into());
        }
        if self.eval.iou_thresholds.len() != self.anchors.class_names.len() {
            return bad("eval.iou_thresholds needs one entry per class".into());
        }
        if self.eval.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) || self.eval.ap_modes.is_empty() {
            return bad("eval thresholds must lie in [0, 1] and at least one AP mode is required".into());
        }
        let o = &self.optim;
        if !(o.peak_lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0) {
            return bad("optim.peak_lr and weight_decay must be nonnegative, eps positive".into());
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("optim betas must lie in [0, 1)".into());
        }
        if o.batch_size == 0 || !(0.0..=1.0).contains(&o.warmup_fraction) || !(o.final_div >= 1.0) || !(o.grad_clip >= 0.0) {
            return bad("optim needs batch_size ≥ 1, warmup_fraction in [0, 1], final_div ≥ 1, grad_clip ≥ 0".into());
        }
        let s = &self.synth;
        if s.min_objects > s.max_objects || !(s.point_density > 0.0) || !(0.0..=1.0).contains(&s.sparse_fraction) {
            return bad("synth needs min_objects ≤ max_objects, positive density, sparse_fraction in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&s.size_jitter) {
            return bad("synth.size_jitter must lie in [0, 1)".into());
        }
        self.model_config()?.validate().map_err(|e| HarnessError::Validation(e.to_string()))?;
        Ok(())
    }

    pub fn bounds(&self) -> Result<Bounds, HarnessError> {
        Bounds::new(self.range.min, self.range.max).map_err(|e| HarnessError::Validation(format!("range: {e}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig, HarnessError> {
        let b = &self.backbone;
        if b.voxel_size.iter().any(|v| !(*v > 0.0)) {
            return Err(HarnessError::Validation(format!("voxel_size must be positive, got {:?}", b.voxel_size)));
        }
        let vsa_radii = match b.vsa_radii.as_slice() {
            [a, b2, c, d] => [*a, *b2, *c, *d],
            _ => BackboneConfig::default_vsa_radii(b.voxel_size),
        };
        let t = &self.transformer;
        let mut attention = AttentionConfig::new(t.d_model, t.heads, t.layers);
        attention.scale = match t.logit_scale {
            LogitScaleName::InputWidth => LogitScale::InputWidth,
            LogitScaleName::KeyWidth => LogitScale::KeyWidth,
        };
        let p = &self.proposals;
        let r = &self.roi;
        let l = &self.loss;
        Ok(ModelConfig {
            backbone: BackboneConfig {
                range: self.bounds()?,
                voxel_size: b.voxel_size,
                voxel_channels: b.voxel_channels,
                bev_channels: b.bev_channels,
                bev_blocks: b.bev_blocks,
                point_channels: b.point_channels,
                point_radius: b.point_radius,
                vsa_radii,
                max_neighbors: b.max_neighbors,
                num_keypoints: b.num_keypoints,
                fps_seed: 0,
            },
            attention,
            class_dims: self.anchors.class_dims.clone(),
            class_z: self.anchors.class_z.clone(),
            rpn_pos_iou: self.anchors.pos_iou,
            rpn_neg_iou: self.anchors.neg_iou,
            rpn_prior: self.anchors.prior,
            train_proposals: ProposalConfig {
                pre_nms: p.pre_nms,
                top_k: p.train_top_k,
                nms_threshold: p.train_nms,
            },
            infer_proposals: ProposalConfig {
                pre_nms: p.pre_nms,
                top_k: p.infer_top_k,
                nms_threshold: p.infer_nms,
            },
            roi_sampling: RoiSampling {
                rois_per_scene: r.per_scene,
                fg_fraction: r.fg_fraction,
                fg_iou: r.fg_iou,
                iou_low: r.iou_low,
                iou_high: r.iou_high,
                include_gt: r.include_gt,
            },
            grid_n: r.grid_n,
            roi_radius: r.radius,
            roi_max_neighbors: r.max_neighbors,
            roi_mlp: r.mlp.clone(),
            rcnn_hidden: r.hidden,
            final_nms: self.detection.final_nms,
            score_threshold: self.detection.score_threshold,
            loss: LossWeights {
                beta_reg: l.beta_reg,
                beta_iou: l.beta_iou,
                beta_ref: l.beta_ref,
                alpha: l.alpha,
                gamma: l.gamma,
                smooth_l1_beta: l.smooth_l1_beta,
            },
        })
    }
}
