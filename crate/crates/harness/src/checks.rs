//! Self-checks behind the `gradcheck` and `iou-fuzz` commands.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use m3fuse_core::backbone::{Backbone, BackboneConfig};
use m3fuse_core::detect::{Proposal, ProposalConfig, RoiSampling};
use m3fuse_core::geometry::{decode_box, encode_box, iou_3d, iou_bev, wrap_angle, Box7};
use m3fuse_core::layers::{Init, Linear, Norm};
use m3fuse_core::losses::LossWeights;
use m3fuse_core::m3transformer::{AttentionConfig, EncoderStack, M3Block};
use m3fuse_core::model::{Model, ModelConfig, ModelError, ProposalSource};
use m3fuse_core::numerics::{grad_check_subset, GradCheckReport, Graph, NumericsError, ParamStore, Tensor, Var};
use m3fuse_core::pointcloud::{set_abstraction, Bounds, Grouping, NeighborIndex, Point, PointCloud, PointMlp};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::HarnessError;

const QK_SPREAD: f64 = 1.5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

/// Spreads every parameter so no branch starts degenerate: norm gains near
/// one, query/key maps wide enough that attention is far from uniform,
/// everything else uniform in `±0.5`.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id);
        let gain = name.ends_with(".gain");
        let qk = if name.ends_with(".wq") || name.ends_with(".wk") { QK_SPREAD } else { 0.5 };
        for v in store.value_mut(id).data_mut() {
            *v = if gain { 1.0 + rng.gen_range(-0.3..0.3) } else { rng.gen_range(-qk..qk) };
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// `Σ out ⊙ probe`, a scalar with a dense, generic gradient.
fn probe(g: &mut Graph, out: Var, probe: &Tensor) -> Result<Var, NumericsError> {
    let p = g.constant(probe.clone());
    let y = g.mul(out, p)?;
    g.sum_all(y)
}

fn run(
    name: &'static str,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var, NumericsError>,
    store: &ParamStore,
    h: f64,
    tol: f64,
    per_param: Option<usize>,
) -> Result<CheckResult, HarnessError> {
    let t = Instant::now();
    let report = grad_check_subset(f, store, h, tol, per_param).map_err(|e| HarnessError::Validation(format!("{name}: {e}")))?;
    Ok(CheckResult {
        name,
        report,
        elapsed: t.elapsed(),
    })
}

fn layers_case(rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<CheckResult, HarnessError> {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, rng, "lin", 5, 4, true, Init::FanIn)?;
    let norm = Norm::new(&mut store, "norm", 4)?;
    store.insert("x", random_tensor(rng, &[6, 5]))?;
    randomize(&mut store, rng);
    let p = random_tensor(rng, &[6, 4]);
    run(
        "layers",
        |g, s| {
            let x = g.param_named(s, "x")?;
            let y = lin.forward(g, s, x)?;
            let y = g.relu(y);
            let y = norm.forward(g, s, y)?;
            probe(g, y, &p)
        },
        &store,
        h,
        tol,
        None,
    )
}

fn set_abstraction_case(rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<CheckResult, HarnessError> {
    let mut store = ParamStore::new();
    let mlp = PointMlp::new(&mut store, rng, "sa", 3, true, &[5, 4])?;
    let pts: Vec<[f64; 3]> = (0..30).map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0))).collect();
    let index = NeighborIndex::new(pts.clone(), 0.6);
    let centers: Vec<[f64; 3]> = pts.iter().step_by(5).copied().collect();
    let grouping = Grouping::by_radius(&index, centers, 0.6, 6);
    store.insert("features", random_tensor(rng, &[30, 3]))?;
    randomize(&mut store, rng);
    let p = random_tensor(rng, &[6, 4]);
    run(
        "set_abstraction",
        |g, s| {
            let f = g.param_named(s, "features")?;
            let y = set_abstraction(g, s, &mlp, f, &pts, &grouping)?;
            probe(g, y, &p)
        },
        &store,
        h,
        tol,
        None,
    )
}

fn attention_case(rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<CheckResult, HarnessError> {
    let mut store = ParamStore::new();
    let stack = EncoderStack::new(&mut store, rng, "enc", AttentionConfig::new(8, 2, 2))?;
    store.insert("x", random_tensor(rng, &[3 * 4, 8]))?;
    randomize(&mut store, rng);
    let p = random_tensor(rng, &[12, 8]);
    run(
        "encoder_stack",
        |g, s| {
            let x = g.param_named(s, "x")?;
            let y = stack.forward(g, s, x, 3)?;
            probe(g, y, &p)
        },
        &store,
        h,
        tol,
        Some(12),
    )
}

fn m3_parts(rng: &mut ChaCha8Rng) -> Result<(impl Fn(&mut Graph, &ParamStore) -> Result<Var, NumericsError>, ParamStore), HarnessError> {
    let mut store = ParamStore::new();
    let widths = [2, 3, 3, 3, 2, 3];
    let block = M3Block::new(&mut store, rng, "m3", &widths, AttentionConfig::new(8, 2, 1))?;
    for (i, &w) in widths.iter().enumerate() {
        store.insert(format!("rep{i}"), random_tensor(rng, &[5, w]))?;
    }
    randomize(&mut store, rng);
    let c_t: usize = widths.iter().sum();
    let p = random_tensor(rng, &[5, c_t]);
    let f = move |g: &mut Graph, s: &ParamStore| {
        let reps = (0..widths.len()).map(|i| g.param_named(s, &format!("rep{i}"))).collect::<Result<Vec<_>, _>>()?;
        let y = block.forward(g, s, &reps)?.fused;
        probe(g, y, &p)
    };
    Ok((f, store))
}

fn m3_case(rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<CheckResult, HarnessError> {
    let (f, store) = m3_parts(rng)?;
    run("m3_block", f, &store, h, tol, Some(10))
}

fn toy_backbone_config() -> BackboneConfig {
    let voxel_size = [0.25, 0.25, 0.5];
    BackboneConfig {
        range: Bounds::new([0.0, -4.0, -1.0], [8.0, 4.0, 1.0]).expect("valid range"),
        voxel_size,
        voxel_channels: [4, 4, 4, 4],
        bev_channels: 4,
        bev_blocks: 1,
        point_channels: 4,
        point_radius: 0.8,
        vsa_radii: BackboneConfig::default_vsa_radii(voxel_size),
        max_neighbors: 6,
        num_keypoints: 12,
        fps_seed: 0,
    }
}

fn toy_cloud(rng: &mut ChaCha8Rng, objects: &[Box7]) -> PointCloud {
    let mut pts = Vec::new();
    for b in objects {
        for _ in 0..25 {
            let u = [rng.gen_range(-0.49..0.49) * b.l, rng.gen_range(-0.49..0.49) * b.w, rng.gen_range(-0.49..0.49) * b.h];
            let p = b.local_to_world(u);
            pts.push(Point::new(p[0], p[1], p[2], rng.gen_range(0.4..0.9)));
        }
    }
    for _ in 0..40 {
        pts.push(Point::new(
            rng.gen_range(0.1..7.9),
            rng.gen_range(-3.9..3.9),
            rng.gen_range(-0.9..0.9),
            rng.gen_range(0.0..0.3),
        ));
    }
    PointCloud::new(pts).expect("finite points")
}

fn backbone_case(rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<CheckResult, HarnessError> {
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, rng, toy_backbone_config())?;
    randomize(&mut store, rng);
    let cloud = toy_cloud(rng, &[]);
    let plan = backbone.plan(&cloud).map_err(|e| HarnessError::Validation(e.to_string()))?;
    let probes: Vec<Tensor> = backbone
        .config
        .representation_widths()
        .iter()
        .map(|&c| random_tensor(rng, &[plan.keypoints.len(), c]))
        .collect();
    run(
        "backbone",
        |g, s| {
            let (kp, _) = backbone.forward(g, s, &plan)?;
            let mut total = g.constant(Tensor::scalar(0.0));
            for (rep, p) in kp.representations().into_iter().zip(&probes) {
                let y = probe(g, rep, p)?;
                total = g.add(total, y)?;
            }
            Ok(total)
        },
        &store,
        h,
        tol,
        Some(6),
    )
}

/// A complete detector small enough to finite-difference.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        backbone: toy_backbone_config(),
        attention: AttentionConfig::new(8, 2, 1),
        class_dims: vec![[2.0, 1.0, 1.0]],
        class_z: vec![0.0],
        rpn_pos_iou: 0.5,
        rpn_neg_iou: 0.3,
        rpn_prior: 0.1,
        train_proposals: ProposalConfig {
            pre_nms: 100,
            top_k: 20,
            nms_threshold: 0.8,
        },
        infer_proposals: ProposalConfig {
            pre_nms: 100,
            top_k: 10,
            nms_threshold: 0.7,
        },
        roi_sampling: RoiSampling {
            rois_per_scene: 4,
            fg_fraction: 0.5,
            fg_iou: 0.3,
            iou_low: 0.1,
            iou_high: 0.9,
            include_gt: false,
        },
        grid_n: 2,
        roi_radius: 2.0,
        roi_max_neighbors: 4,
        roi_mlp: vec![3],
        rcnn_hidden: 6,
        final_nms: 0.1,
        score_threshold: 0.0,
        loss: LossWeights::default(),
    }
}

fn composite_parts(rng: &mut ChaCha8Rng) -> Result<(impl Fn(&mut Graph, &ParamStore) -> Result<Var, NumericsError>, ParamStore), HarnessError> {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, rng, toy_model_config())?;
    randomize(&mut store, rng);
    let gts = vec![
        (0, Box7::new(2.0, -1.0, 0.0, 2.0, 1.0, 1.0, 0.3).expect("box")),
        (0, Box7::new(5.5, 2.0, 0.0, 2.2, 1.0, 0.9, -1.2).expect("box")),
    ];
    let boxes: Vec<Box7> = gts.iter().map(|(_, b)| *b).collect();
    let cloud = toy_cloud(rng, &boxes);
    let plan = model.plan(&cloud, &gts)?;
    // fixed proposals keep the objective smooth under perturbation
    let proposals: Vec<Proposal> = gts
        .iter()
        .enumerate()
        .flat_map(|(i, (_, b))| {
            [0.2, -0.35].map(|d| Proposal {
                bbox: Box7 {
                    x: b.x + d,
                    y: b.y - d / 2.0,
                    theta: wrap_angle(b.theta + d),
                    ..*b
                },
                objectness: 0.9 - 0.1 * i as f64,
                class: 0,
                anchor: 0,
            })
        })
        .collect();
    let source = ProposalSource::Injected(proposals);
    let f = move |g: &mut Graph, s: &ParamStore| {
            let out = model.forward_train(g, s, &plan, &source).map_err(|e| match e {
                ModelError::Numerics(n) => n,
                _ => NumericsError::Domain {
                    op: "forward_train",
                    value: f64::NAN,
                },
            })?;
            Ok(out.total)
        };
    Ok((f, store))
}

fn composite_case(rng: &mut ChaCha8Rng, h: f64, tol: f64) -> Result<CheckResult, HarnessError> {
    let (f, store) = composite_parts(rng)?;
    run("full_model", f, &store, h, tol, Some(4))
}

/// Finite-difference checks over every differentiable stage, ending with
/// the full detector objective on a toy scene.
pub fn gradcheck_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<CheckResult>, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        layers_case(&mut rng, h, tol)?,
        set_abstraction_case(&mut rng, h, tol)?,
        attention_case(&mut rng, h, tol)?,
        m3_case(&mut rng, h, tol)?,
        backbone_case(&mut rng, h, tol)?,
        composite_case(&mut rng, h, tol)?,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IouFuzzReport {
    pub pairs: usize,
    pub max_bev_error: f64,
    pub max_3d_error: f64,
    pub max_round_trip_error: f64,
}

/// Jittered-grid Monte-Carlo estimate of (BEV IoU, 3D IoU) using about
/// `samples` draws per measure, spread over `a` and tested against `b`.
pub fn monte_carlo_iou(a: &Box7, b: &Box7, samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    // a's frame to b's frame as one affine map
    let (sa, ca) = a.theta.sin_cos();
    let (sb, cb) = b.theta.sin_cos();
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    let off = [cb * dx + sb * dy, -sb * dx + cb * dy];
    let m = [cb * ca + sb * sa, -cb * sa + sb * ca, -sb * ca + cb * sa, sb * sa + cb * ca];
    let (hl, hw) = (0.5 * b.l, 0.5 * b.w);
    let inside_bev = |u: f64, v: f64| {
        (off[0] + m[0] * u + m[1] * v).abs() <= hl && (off[1] + m[2] * u + m[3] * v).abs() <= hw
    };

    // a 32-bit jitter is plenty within one grid cell and halves the stream use
    let mut jitter = || (rng.next_u32() as f64 + 0.5) * (1.0 / 4_294_967_296.0);

    let n = (samples as f64).sqrt().round() as usize;
    let mut hits = 0usize;
    for i in 0..n {
        for j in 0..n {
            let u = ((i as f64 + jitter()) / n as f64 - 0.5) * a.l;
            let v = ((j as f64 + jitter()) / n as f64 - 0.5) * a.w;
            hits += usize::from(inside_bev(u, v));
        }
    }
    let inter = a.bev_area() * hits as f64 / (n * n) as f64;
    let bev = inter / (a.bev_area() + b.bev_area() - inter);

    let k = (samples as f64).cbrt().round() as usize;
    let (z0, z1) = b.z_range();
    let mut hits3 = 0usize;
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                let u = ((i as f64 + jitter()) / k as f64 - 0.5) * a.l;
                let v = ((j as f64 + jitter()) / k as f64 - 0.5) * a.w;
                let z = a.z + ((l as f64 + jitter()) / k as f64 - 0.5) * a.h;
                hits3 += usize::from(z >= z0 && z <= z1 && inside_bev(u, v));
            }
        }
    }
    let inter3 = a.volume() * hits3 as f64 / (k * k * k) as f64;
    (bev, inter3 / (a.volume() + b.volume() - inter3))
}

fn random_box(rng: &mut ChaCha8Rng, near: Option<&Box7>) -> Box7 {
    let (cx, cy, cz, spread) = match near {
        Some(a) => (a.x, a.y, a.z, 1.5),
        None => (0.0, 0.0, 0.0, 5.0),
    };
    Box7::new(
        cx + rng.gen_range(-spread..spread),
        cy + rng.gen_range(-spread..spread),
        cz + rng.gen_range(-0.8..0.8),
        rng.gen_range(0.5..5.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(-PI..PI),
    )
    .expect("positive dimensions")
}

fn fuzz_pair(seed: u64, index: u64, samples: usize) -> IouFuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let a = random_box(&mut rng, None);
    let b = random_box(&mut rng, Some(&a));
    let (bev, v3) = monte_carlo_iou(&a, &b, samples, &mut rng);
    let back = decode_box(&encode_box(&b, &a).expect("valid boxes"), &a).expect("finite decode");
    let round_trip = [
        (b.x - back.x).abs(),
        (b.y - back.y).abs(),
        (b.z - back.z).abs(),
        ((b.l - back.l) / b.l).abs(),
        ((b.h - back.h) / b.h).abs(),
        ((b.w - back.w) / b.w).abs(),
        wrap_angle(b.theta - back.theta).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    IouFuzzReport {
        pairs: 1,
        max_bev_error: (iou_bev(&a, &b) - bev).abs(),
        max_3d_error: (iou_3d(&a, &b) - v3).abs(),
        max_round_trip_error: round_trip,
    }
}

impl IouFuzzReport {
    fn merge(self, o: Self) -> Self {
        Self {
            pairs: self.pairs + o.pairs,
            max_bev_error: self.max_bev_error.max(o.max_bev_error),
            max_3d_error: self.max_3d_error.max(o.max_3d_error),
            max_round_trip_error: self.max_round_trip_error.max(o.max_round_trip_error),
        }
    }
}

/// Analytic IoU against the Monte-Carlo oracle and encode/decode round
/// trips on `pairs` random pairs (mostly overlapping). Each pair draws from
/// its own stream, so the thread count does not affect the result.
pub fn iou_fuzz(pairs: usize, samples: usize, seed: u64, threads: usize) -> IouFuzzReport {
    let threads = threads.clamp(1, pairs.max(1));
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    (t..pairs)
                        .step_by(threads)
                        .map(|i| fuzz_pair(seed, i as u64, samples))
                        .fold(IouFuzzReport::default(), IouFuzzReport::merge)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("fuzz worker panicked"))
            .fold(IouFuzzReport::default(), IouFuzzReport::merge)
    })
}
