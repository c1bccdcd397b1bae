//! Deterministic synthetic scenes: non-overlapping boxes filled with points
//! on their surface and inside, plus uniform clutter.

use std::f64::consts::PI;

use m3fuse_core::geometry::{iou_bev, Box7};
use m3fuse_core::pointcloud::{Point, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::scene::{Label, Scene};
use crate::HarnessError;

/// Placement attempts per object before giving up.
const MAX_TRIES: usize = 200;
/// Largest BEV IoU allowed between two generated objects.
const MAX_OVERLAP: f64 = 0.05;
/// Focal length (pixels) of the pinhole camera behind the height proxy.
const FOCAL_PX: f64 = 721.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n_objects: usize,
    /// Relative sampling weight per class.
    pub class_mix: Vec<f64>,
    pub clutter_points: usize,
    pub point_density: f64,
    pub sparse_fraction: f64,
    pub size_jitter: f64,
}

impl SynthParams {
    /// Object count drawn from the configured range with the scene's stream.
    pub fn from_config(cfg: &PipelineConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = &cfg.synth;
        Self {
            n_objects: rng.gen_range(s.min_objects..=s.max_objects),
            class_mix: vec![1.0; cfg.anchors.class_names.len()],
            clutter_points: s.clutter_points,
            point_density: s.point_density,
            sparse_fraction: s.sparse_fraction,
            size_jitter: s.size_jitter,
        }
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Scene `index` of the set defined by `seed`; independent of how many
/// other scenes are generated.
pub fn generate_indexed(cfg: &PipelineConfig, seed: u64, index: u64) -> Result<Scene, HarnessError> {
    let mut rng = scene_rng(seed, index);
    let params = SynthParams::from_config(cfg, &mut rng);
    generate_synthetic_scene(cfg, &params, &mut rng, format!("{index:06}"))
}

pub fn generate_scenes(cfg: &PipelineConfig, seed: u64, count: usize) -> Result<Vec<Scene>, HarnessError> {
    (0..count as u64).map(|i| generate_indexed(cfg, seed, i)).collect()
}

fn pick_class(rng: &mut impl Rng, mix: &[f64]) -> usize {
    let total: f64 = mix.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (c, w) in mix.iter().enumerate() {
        if u < *w {
            return c;
        }
        u -= w;
    }
    mix.len() - 1
}

/// Uniform sample on the box surface (faces weighted by area) or inside.
fn sample_in_box(rng: &mut impl Rng, b: &Box7, surface: bool) -> [f64; 3] {
    // shrink a hair so points never land exactly on a face
    let half = [0.4995 * b.l, 0.4995 * b.w, 0.4995 * b.h];
    let mut u = [0, 1, 2].map(|a| rng.gen_range(-half[a]..half[a]));
    if surface {
        let areas = [b.w * b.h, b.l * b.h, b.l * b.w];
        let axis = pick_class(rng, &areas);
        u[axis] = if rng.gen_bool(0.5) { half[axis] } else { -half[axis] };
    }
    b.local_to_world(u)
}

fn in_range(b: &Box7, min: [f64; 3], max: [f64; 3]) -> bool {
    let corners = m3fuse_core::geometry::bev_corners(b);
    let (z0, z1) = b.z_range();
    corners.iter().all(|c| c[0] >= min[0] && c[0] < max[0] && c[1] >= min[1] && c[1] < max[1]) && z0 >= min[2] && z1 < max[2]
}

pub fn generate_synthetic_scene(
    cfg: &PipelineConfig,
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
    id: String,
) -> Result<Scene, HarnessError> {
    let (min, max) = (cfg.range.min, cfg.range.max);
    let mut boxes: Vec<(usize, Box7)> = Vec::with_capacity(params.n_objects);
    for k in 0..params.n_objects {
        let class = pick_class(rng, &params.class_mix);
        let [l, h, w] = cfg.anchors.class_dims[class];
        let j = params.size_jitter;
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let mut scale = || if j > 0.0 { 1.0 + rng.gen_range(-j..j) } else { 1.0 };
            let (l, h, w) = (l * scale(), h * scale(), w * scale());
            // a half-turn of yaw covers every footprint once
            let theta = rng.gen_range(-PI / 4.0..3.0 * PI / 4.0);
            let x = rng.gen_range(min[0]..max[0]);
            let y = rng.gen_range(min[1]..max[1]);
            let z = cfg.anchors.class_z[class] + (h - cfg.anchors.class_dims[class][1]) / 2.0;
            let b = Box7::new(x, y, z, l, h, w, theta).map_err(|e| HarnessError::Generation(e.to_string()))?;
            if in_range(&b, min, max) && boxes.iter().all(|(_, o)| iou_bev(o, &b) <= MAX_OVERLAP) {
                placed = Some(b);
                break;
            }
        }
        let b = placed.ok_or_else(|| {
            HarnessError::Generation(format!("could not place object {k} of {} after {MAX_TRIES} tries", params.n_objects))
        })?;
        boxes.push((class, b));
    }

    let mut points = Vec::new();
    for (_, b) in &boxes {
        let n = if rng.gen_bool(params.sparse_fraction) {
            rng.gen_range(2..=5)
        } else {
            ((params.point_density * b.volume()).round() as usize).max(8)
        };
        for i in 0..n {
            let p = sample_in_box(rng, b, i % 2 == 0);
            points.push(Point::new(p[0], p[1], p[2], rng.gen_range(0.4..0.9)));
        }
    }
    let mut clutter = 0;
    while clutter < params.clutter_points {
        let p = [0, 1, 2].map(|a| rng.gen_range(min[a]..max[a]));
        // keep objects' point counts exactly as generated
        if boxes.iter().any(|(_, b)| b.contains(p)) {
            continue;
        }
        points.push(Point::new(p[0], p[1], p[2], rng.gen_range(0.0..0.3)));
        clutter += 1;
    }
    let cloud = PointCloud::new(points).map_err(|e| HarnessError::Generation(e.to_string()))?;
    let labels = boxes
        .iter()
        .map(|&(class, bbox)| Label {
            class,
            bbox,
            points_inside: Scene::count_inside(&cloud, &bbox),
            height_px: FOCAL_PX * bbox.h / bbox.x.abs().max(1.0),
            occlusion: 0,
            truncation: 0.0,
        })
        .collect();
    Ok(Scene { id, cloud, labels })
}
