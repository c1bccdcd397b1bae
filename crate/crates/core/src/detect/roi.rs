use rand::Rng;

use crate::geometry::{iou_3d, Box7};
use crate::layers::{Init, Linear};
use crate::numerics::{Graph, NumericsError, ParamStore, Var};
use crate::pointcloud::{set_abstraction, Grouping, NeighborIndex, PointMlp};

/// Uniform `n³` grid in the box frame, cell centres, mapped to world.
pub fn roi_grid_points(b: &Box7, n: usize) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(n * n * n);
    let f = |i: usize| (i as f64 + 0.5) / n as f64 - 0.5;
    for a in 0..n {
        for bb in 0..n {
            for c in 0..n {
                pts.push(b.local_to_world([f(a) * b.l, f(bb) * b.w, f(c) * b.h]));
            }
        }
    }
    pts
}

/// Keypoints in a canonical (coordinate-sorted) order, so neighborhoods do
/// not depend on how keypoints are stored.
#[derive(Debug, Clone)]
pub struct KeypointIndex {
    pub order: Vec<usize>,
    pub index: NeighborIndex,
}

impl KeypointIndex {
    pub fn new(positions: &[[f64; 3]], radius: f64) -> Self {
        let mut order: Vec<usize> = (0..positions.len()).collect();
        order.sort_by(|&a, &b| {
            let (p, q) = (positions[a], positions[b]);
            p[0].total_cmp(&q[0])
                .then(p[1].total_cmp(&q[1]))
                .then(p[2].total_cmp(&q[2]))
                .then(a.cmp(&b))
        });
        let sorted = order.iter().map(|&i| positions[i]).collect();
        Self {
            order,
            index: NeighborIndex::new(sorted, radius),
        }
    }

    /// Grid points of every proposal with their neighborhoods; offsets are
    /// expressed in each proposal's rotated frame.
    pub fn grouping(&self, proposals: &[Box7], grid_n: usize, radius: f64, max_neighbors: usize) -> Grouping {
        let mut centers = Vec::with_capacity(proposals.len() * grid_n.pow(3));
        let mut yaw = Vec::with_capacity(centers.capacity());
        for p in proposals {
            for pt in roi_grid_points(p, grid_n) {
                centers.push(pt);
                yaw.push(p.theta);
            }
        }
        let mut g = Grouping::by_radius(&self.index, centers, radius, max_neighbors);
        g.yaw = Some(yaw);
        g
    }
}

/// Pools keypoint features around every grid point of every proposal;
/// returns `[proposals × grid_n³·c_out]`.
pub fn roi_grid_pool(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &PointMlp,
    keypoint_features: Var,
    keypoints: &KeypointIndex,
    grouping: &Grouping,
    points_per_roi: usize,
) -> Result<Var, NumericsError> {
    let identity = keypoints.order.iter().enumerate().all(|(a, &b)| a == b);
    let feats = if identity {
        keypoint_features
    } else {
        g.gather_rows(keypoint_features, keypoints.order.clone())?
    };
    let pooled = set_abstraction(g, store, mlp, feats, keypoints.index.points(), grouping)?;
    let n_proposals = grouping.len() / points_per_roi.max(1);
    g.reshape(pooled, &[n_proposals, points_per_roi * mlp.out_dim()])
}

/// Two shared fully connected layers followed by a confidence and a
/// refinement head.
#[derive(Debug, Clone, PartialEq)]
pub struct RcnnHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub conf: Linear,
    pub reg: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct RcnnOutput {
    /// Confidence logits `[proposals × 1]`.
    pub conf_logits: Var,
    /// Refinement deltas relative to each proposal `[proposals × 7]`.
    pub deltas: Var,
}

impl RcnnHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), in_dim, hidden, true, Init::FanIn)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, hidden, true, Init::FanIn)?,
            conf: Linear::new(store, rng, &format!("{name}.conf"), hidden, 1, true, Init::FanIn)?,
            reg: Linear::new(store, rng, &format!("{name}.reg"), hidden, 7, true, Init::FanIn)?,
        })
    }
}

pub fn rcnn_refine(g: &mut Graph, store: &ParamStore, head: &RcnnHead, pooled: Var) -> Result<RcnnOutput, NumericsError> {
    let h = head.fc1.forward(g, store, pooled)?;
    let h = g.relu(h);
    let h = head.fc2.forward(g, store, h)?;
    let h = g.relu(h);
    Ok(RcnnOutput {
        conf_logits: head.conf.forward(g, store, h)?,
        deltas: head.reg.forward(g, store, h)?,
    })
}

/// `clamp((max IoU − low) / (high − low), 0, 1)` over the ground truths.
pub fn iou_confidence_target(proposal: &Box7, gts: &[Box7], low: f64, high: f64) -> f64 {
    let best = gts.iter().map(|gt| iou_3d(proposal, gt)).fold(0.0, f64::max);
    ((best - low) / (high - low)).clamp(0.0, 1.0)
}
