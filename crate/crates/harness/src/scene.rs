//! Scenes: a point cloud plus its annotations.

use m3fuse_core::eval::{kitti_difficulty, GroundTruthBox};
use m3fuse_core::geometry::Box7;
use m3fuse_core::pointcloud::PointCloud;

/// One annotated object as stored in a label file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub class: usize,
    pub bbox: Box7,
    pub points_inside: usize,
    /// Image-height proxy used for difficulty bucketing.
    pub height_px: f64,
    pub occlusion: u8,
    pub truncation: f64,
}

impl Label {
    pub fn ground_truth(&self) -> GroundTruthBox {
        GroundTruthBox {
            bbox: self.bbox,
            class: self.class,
            points_inside: self.points_inside,
            difficulty: kitti_difficulty(self.height_px, self.occlusion, self.truncation),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub cloud: PointCloud,
    pub labels: Vec<Label>,
}

impl Scene {
    pub fn gts(&self) -> Vec<(usize, Box7)> {
        self.labels.iter().map(|l| (l.class, l.bbox)).collect()
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthBox> {
        self.labels.iter().map(Label::ground_truth).collect()
    }

    /// Number of cloud points inside `b`.
    pub fn count_inside(cloud: &PointCloud, b: &Box7) -> usize {
        cloud.points.iter().filter(|p| b.contains(p.xyz())).count()
    }
}
