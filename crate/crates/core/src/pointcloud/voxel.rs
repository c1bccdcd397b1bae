use std::collections::BTreeMap;

use super::{PointCloud, PointCloudError};

/// Axis-aligned region of interest; `min` inclusive, `max` exclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, PointCloudError> {
        if (0..3).any(|a| !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(PointCloudError::Range { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }

    pub fn size(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }

    /// Number of voxels per axis at the given voxel size.
    pub fn extents(&self, voxel_size: [f64; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| ((self.max[a] - self.min[a]) / voxel_size[a]).round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCell {
    pub feature: Vec<f64>,
    pub count: usize,
}

/// Sparse voxel occupancy; only non-empty cells are stored, keyed by
/// integer `(i, j, k)` along `(x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub extents: [usize; 3],
    pub cells: BTreeMap<[usize; 3], VoxelCell>,
}

impl VoxelGrid {
    pub fn empty(origin: [f64; 3], voxel_size: [f64; 3], extents: [usize; 3]) -> Self {
        Self {
            origin,
            voxel_size,
            extents,
            cells: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.cells.values().next().map_or(0, |c| c.feature.len())
    }

    pub fn cell_center(&self, key: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + (key[a] as f64 + 0.5) * self.voxel_size[a])
    }

    /// Cell containing `p`, if it lies inside the grid.
    pub fn key_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut key = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size[a]).floor();
            if f < 0.0 || f >= self.extents[a] as f64 {
                return None;
            }
            key[a] = f as usize;
        }
        Some(key)
    }
}

/// Averages `(x, y, z, r)` of the in-range points of every occupied cell.
pub fn voxelize(pc: &PointCloud, range: &Bounds, voxel_size: [f64; 3]) -> Result<VoxelGrid, PointCloudError> {
    if voxel_size.iter().any(|v| !(*v > 0.0)) {
        return Err(PointCloudError::VoxelSize(voxel_size));
    }
    let range = Bounds::new(range.min, range.max)?;
    let mut grid = VoxelGrid::empty(range.min, voxel_size, range.extents(voxel_size));
    let mut sums: BTreeMap<[usize; 3], ([f64; 4], usize)> = BTreeMap::new();
    for p in &pc.points {
        if !range.contains(p.xyz()) {
            continue;
        }
        let Some(key) = grid.key_of(p.xyz()) else { continue };
        let entry = sums.entry(key).or_insert(([0.0; 4], 0));
        for (s, f) in entry.0.iter_mut().zip(p.features()) {
            *s += f;
        }
        entry.1 += 1;
    }
    for (key, (sum, count)) in sums {
        let feature = sum.iter().map(|s| s / count as f64).collect();
        grid.cells.insert(key, VoxelCell { feature, count });
    }
    Ok(grid)
}
