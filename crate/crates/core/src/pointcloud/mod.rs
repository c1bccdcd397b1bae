//! Raw point-set primitives.

mod neighbors;
mod sampling;
mod set_abstraction;
mod voxel;


use thiserror::Error;

pub use neighbors::{brute_force_radius_query, NeighborIndex};
pub use sampling::furthest_point_sampling;
pub use set_abstraction::{set_abstraction, Grouping, PointMlp};
pub use voxel::{voxelize, Bounds, VoxelCell, VoxelGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PointCloudError {
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("voxel size must be positive on every axis, got {0:?}")]
    VoxelSize([f64; 3]),
    #[error("degenerate range: min {min:?}, max {max:?}")]
    Range { min: [f64; 3], max: [f64; 3] },
    #[error("non-finite point at index {0}")]
    NonFinite(usize),
}

/// One LiDAR return; `r` is reflectance in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Feature layout used everywhere: `(x, y, z, r)`.
    pub fn features(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.r]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self, PointCloudError> {
        if let Some(i) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.r.is_finite()))
        {
            return Err(PointCloudError::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(Point::xyz).collect()
    }

    /// Points inside `bounds` (min inclusive, max exclusive).
    pub fn crop(&self, bounds: &Bounds) -> PointCloud {
        PointCloud {
            points: self.points.iter().copied().filter(|p| bounds.contains(p.xyz())).collect(),
        }
    }
}

pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
