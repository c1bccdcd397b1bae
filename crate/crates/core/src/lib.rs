//! Building blocks of a two-stage LiDAR object detector whose keypoint
//! features are fused by two stacked transformer layers: one attending over
//! the six feature representations of each keypoint, one attending across
//! keypoints.
//!
//! Everything is `f64` and differentiable through [`numerics::Graph`].

pub mod numerics;
pub mod geometry;
pub mod layers;
pub mod pointcloud;
pub mod backbone;
pub mod m3transformer;
pub mod detect;
pub mod losses;
pub mod eval;
pub mod model;
