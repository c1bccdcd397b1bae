//! Voxel, BEV and raw-point encoders producing per-keypoint features.

mod bev;
mod keypoints;
mod sparse;


use rand::Rng;

pub use bev::{
    bev_bilinear_sample, bev_bilinear_sample_with, bev_conv_net, bev_flatten, bev_flatten_index, bev_flatten_with,
    bilinear_taps, conv2d_index, deconv2d_index, BevMap, BevNet, BevPlan, Conv2dLayer,
};
pub use keypoints::{voxel_set_abstraction, KeypointFeatures, ScaleGrouping};
pub use sparse::{run_voxel_cnn, sparse_conv_block, ConvRulebook, SparseConvLayer, SparseTensor, VoxelCnn, KERNEL_OFFSETS};

use crate::numerics::{Graph, NumericsError, ParamStore, Tensor};
use crate::pointcloud::{furthest_point_sampling, voxelize, Bounds, Grouping, NeighborIndex, PointCloud, PointCloudError, PointMlp, VoxelGrid};

/// Shape hyper-parameters of the encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub range: Bounds,
    pub voxel_size: [f64; 3],
    pub voxel_channels: [usize; 4],
    pub bev_channels: usize,
    pub bev_blocks: usize,
    pub point_channels: usize,
    pub point_radius: f64,
    /// One radius per voxel scale.
    pub vsa_radii: [f64; 4],
    pub max_neighbors: usize,
    pub num_keypoints: usize,
    pub fps_seed: usize,
}

impl BackboneConfig {
    /// Twice the voxel diagonal of each scale.
    pub fn default_vsa_radii(voxel_size: [f64; 3]) -> [f64; 4] {
        let diag = voxel_size.iter().map(|v| v * v).sum::<f64>().sqrt();
        [1.0, 2.0, 4.0, 8.0].map(|s| 2.0 * diag * s)
    }

    /// Widths of the six keypoint representations.
    pub fn representation_widths(&self) -> [usize; 6] {
        let v = self.voxel_channels;
        [v[0], v[1], v[2], v[3], self.point_channels, self.bev_channels]
    }
}

/// All learnable encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub cnn: VoxelCnn,
    pub bev: BevNet,
    pub vsa: Vec<PointMlp>,
    pub point: PointMlp,
}

/// Everything about one scene that depends only on its geometry: the voxel
/// grid, conv rulebooks, keypoints and neighborhoods. Computed once and
/// reused across training steps.
#[derive(Debug, Clone)]
pub struct BackbonePlan {
    pub grid: VoxelGrid,
    pub rulebooks: Vec<ConvRulebook>,
    pub bev_index: Vec<usize>,
    pub bev_extents: [usize; 3],
    pub bev_plan: BevPlan,
    pub keypoints: Vec<[f64; 3]>,
    pub vsa: Vec<ScaleGrouping>,
    pub points: Vec<[f64; 3]>,
    pub point_features: Vec<f64>,
    pub point_grouping: Grouping,
    pub bev_taps: ([Vec<usize>; 4], [Vec<f64>; 4]),
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: BackboneConfig) -> Result<Self, NumericsError> {
        let cnn = VoxelCnn::new(store, rng, "voxel_cnn", 4, config.voxel_channels)?;
        let z8 = config.range.extents(config.voxel_size)[2].div_ceil(8);
        let bev = BevNet::new(
            store,
            rng,
            "bev_net",
            z8 * config.voxel_channels[3],
            config.bev_channels,
            config.bev_blocks,
        )?;
        let mut vsa = Vec::new();
        for (i, &c) in config.voxel_channels.iter().enumerate() {
            vsa.push(PointMlp::new(store, rng, &format!("vsa{i}"), c, true, &[c, c])?);
        }
        let pc = config.point_channels;
        let point = PointMlp::new(store, rng, "point_sa", 4, true, &[pc, pc])?;
        Ok(Self {
            config,
            cnn,
            bev,
            vsa,
            point,
        })
    }

    /// BEV pixel pitch (the 8× voxel size in x/y).
    pub fn bev_pixel_size(&self) -> [f64; 2] {
        [self.config.voxel_size[0] * 8.0, self.config.voxel_size[1] * 8.0]
    }

    pub fn plan(&self, cloud: &PointCloud) -> Result<BackbonePlan, PointCloudError> {
        let cfg = &self.config;
        let grid = voxelize(cloud, &cfg.range, cfg.voxel_size)?;
        let keys: Vec<[usize; 3]> = grid.cells.keys().copied().collect();
        let rulebooks = self.cnn.plan(&keys, grid.extents);
        let last = rulebooks.last().expect("four blocks");
        let bev_extents = last.out_extents;
        let bev_index = bev_flatten_index(&last.out_keys, bev_extents);
        let bev_plan = BevPlan::new(bev_extents[0], bev_extents[1]);

        let inside = cloud.crop(&cfg.range);
        let points = inside.positions();
        let keypoints: Vec<[f64; 3]> = if points.is_empty() {
            Vec::new()
        } else {
            furthest_point_sampling(&points, cfg.num_keypoints, cfg.fps_seed)?
                .into_iter()
                .map(|i| points[i])
                .collect()
        };

        let mut vsa = Vec::new();
        let mut size = cfg.voxel_size;
        for (book, &radius) in rulebooks.iter().zip(&cfg.vsa_radii) {
            size = [0, 1, 2].map(|a| size[a] * book.stride as f64);
            vsa.push(ScaleGrouping::new(
                &book.out_keys,
                cfg.range.min,
                size,
                &keypoints,
                radius,
                cfg.max_neighbors,
            ));
        }
        let index = NeighborIndex::new(points.clone(), cfg.point_radius);
        let point_grouping = Grouping::by_radius(&index, keypoints.clone(), cfg.point_radius, cfg.max_neighbors);
        let point_features = inside.points.iter().flat_map(|p| p.features()).collect();
        let bev_taps = bilinear_taps(
            &keypoints,
            bev_extents[0],
            bev_extents[1],
            [cfg.range.min[0], cfg.range.min[1]],
            self.bev_pixel_size(),
        );
        Ok(BackbonePlan {
            grid,
            rulebooks,
            bev_index,
            bev_extents,
            bev_plan,
            keypoints,
            vsa,
            points,
            point_features,
            point_grouping,
            bev_taps,
        })
    }

    /// Runs all encoders and returns the six keypoint representations plus
    /// the dense BEV map (used by the proposal head).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        plan: &BackbonePlan,
    ) -> Result<(KeypointFeatures, BevMap), NumericsError> {
        let input = SparseTensor::from_grid(g, &plan.grid);
        let scales = run_voxel_cnn(g, store, &input, &self.cnn, &plan.rulebooks)?;
        let flat = bev_flatten_with(g, scales[3].features, plan.bev_index.clone(), plan.bev_extents)?;
        let bev = bev_conv_net(g, store, &flat, &self.bev, &plan.bev_plan)?;
        let voxel = voxel_set_abstraction(g, store, &scales, &self.vsa, &plan.vsa)?;
        let raw = g.constant(Tensor::new(vec![plan.points.len(), 4], plan.point_features.clone())?);
        let point = crate::pointcloud::set_abstraction(g, store, &self.point, raw, &plan.points, &plan.point_grouping)?;
        let bev_feats = bev_bilinear_sample_with(g, &bev, &plan.bev_taps)?;
        Ok((
            KeypointFeatures {
                positions: plan.keypoints.clone(),
                voxel,
                point,
                bev: bev_feats,
            },
            bev,
        ))
    }
}
