use super::SparseTensor;
use crate::numerics::{Graph, NumericsError, ParamStore, Var};
use crate::pointcloud::{set_abstraction, Grouping, NeighborIndex, PointMlp};

/// Neighborhoods of the keypoints among one scale's voxel centres.
///
/// Cells are first put in key order, so the result does not depend on how
/// the scale happens to store them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGrouping {
    /// Storage row of each cell in key order.
    pub order: Vec<usize>,
    pub positions: Vec<[f64; 3]>,
    pub grouping: Grouping,
}

impl ScaleGrouping {
    pub fn new(
        keys: &[[usize; 3]],
        origin: [f64; 3],
        voxel_size: [f64; 3],
        keypoints: &[[f64; 3]],
        radius: f64,
        max_neighbors: usize,
    ) -> Self {
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by_key(|&i| keys[i]);
        let positions: Vec<[f64; 3]> = order
            .iter()
            .map(|&i| [0, 1, 2].map(|a| origin[a] + (keys[i][a] as f64 + 0.5) * voxel_size[a]))
            .collect();
        let index = NeighborIndex::new(positions.clone(), radius);
        let grouping = Grouping::by_radius(&index, keypoints.to_vec(), radius, max_neighbors);
        Self {
            order,
            positions,
            grouping,
        }
    }

    pub fn for_scale(scale: &SparseTensor, keypoints: &[[f64; 3]], radius: f64, max_neighbors: usize) -> Self {
        Self::new(&scale.keys, scale.origin, scale.voxel_size, keypoints, radius, max_neighbors)
    }
}

/// Set abstraction of every scale's voxel features around the keypoints;
/// returns one `[n × c_i]` matrix per scale.
pub fn voxel_set_abstraction(
    g: &mut Graph,
    store: &ParamStore,
    scales: &[SparseTensor],
    mlps: &[PointMlp],
    groupings: &[ScaleGrouping],
) -> Result<Vec<Var>, NumericsError> {
    if scales.len() != mlps.len() || scales.len() != groupings.len() {
        return Err(NumericsError::Shape {
            op: "voxel_set_abstraction",
            left: vec![scales.len(), mlps.len()],
            right: vec![groupings.len()],
        });
    }
    let mut out = Vec::with_capacity(scales.len());
    for ((scale, mlp), sg) in scales.iter().zip(mlps).zip(groupings) {
        let identity = sg.order.iter().enumerate().all(|(a, &b)| a == b);
        let feats = if identity {
            scale.features
        } else {
            g.gather_rows(scale.features, sg.order.clone())?
        };
        out.push(set_abstraction(g, store, mlp, feats, &sg.positions, &sg.grouping)?);
    }
    Ok(out)
}

/// All per-keypoint representations, each `[n × c]`.
#[derive(Debug, Clone)]
pub struct KeypointFeatures {
    pub positions: Vec<[f64; 3]>,
    pub voxel: Vec<Var>,
    pub point: Var,
    pub bev: Var,
}

impl KeypointFeatures {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The six representations in fixed order: voxel scales 1×…8×, raw
    /// points, BEV.
    pub fn representations(&self) -> Vec<Var> {
        self.voxel.iter().copied().chain([self.point, self.bev]).collect()
    }
}
