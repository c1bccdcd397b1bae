//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p m3fuse-harness --test acceptance` runs everything; pass
//! criterion numbers (`-- 2 5`) to run a subset.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use m3fuse_core::detect::Detection;
use m3fuse_core::eval::{
    average_precision, class_curves, match_detections, ApMode, Difficulty, EvalQuery, Event, GroundTruthBox, Level, PrCurve,
    SceneEval, Subset,
};
use m3fuse_core::geometry::{nms, Box7, IouKind};
use m3fuse_core::m3transformer::{
    attention, feature_reduce, multi_rep_scale_layer, mutual_relation_layer, M3Block, MultiHead,
};
use m3fuse_core::numerics::{Graph, ParamStore, Tensor};
use m3fuse_core::pointcloud::{furthest_point_sampling, NeighborIndex};
use m3fuse_harness::checks::{gradcheck_suite, iou_fuzz};
use m3fuse_harness::evaluate::{compute_metrics, detect_scenes};
use m3fuse_harness::synth::generate_scenes;
use m3fuse_harness::train::Trainer;
use m3fuse_harness::PipelineConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

// ---------------------------------------------------------------- 1

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let results = match gradcheck_suite(PipelineConfig::desk().seed, 1e-5, 1e-4) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let elapsed = t.elapsed();
    let worst = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.report.passed()).map(|r| r.name).collect();
    let parts: Vec<String> = results.iter().map(|r| format!("{} {:.1e}", r.name, r.report.max_rel_error)).collect();
    outcome(
        failed.is_empty() && within(elapsed, 120),
        format!("max rel err {worst:.2e} < 1e-4 [{}] in {elapsed:.1?}{}", parts.join(", "), fail_list(&failed)),
    )
}

fn fail_list(failed: &[&str]) -> String {
    if failed.is_empty() {
        String::new()
    } else {
        format!("; failing: {}", failed.join(", "))
    }
}

// ---------------------------------------------------------------- 2

fn geometry_oracle() -> Outcome {
    let t = Instant::now();
    let r = iou_fuzz(10_000, 200_000, 2024, threads());
    let elapsed = t.elapsed();
    outcome(
        r.max_bev_error <= 3e-3 && r.max_3d_error <= 3e-3 && r.max_round_trip_error < 1e-9 && within(elapsed, 60),
        format!(
            "{} pairs: |bev-mc| {:.2e}, |3d-mc| {:.2e} (≤ 3e-3), round trip {:.1e} (< 1e-9) in {elapsed:.1?}",
            r.pairs, r.max_bev_error, r.max_3d_error, r.max_round_trip_error
        ),
    )
}

// ---------------------------------------------------------------- 3

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Non-degenerate weights: the default init zeroes residual branches,
/// which would make every invariant trivial.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let center = if store.name(id).ends_with(".gain") { 1.0 } else { 0.0 };
        for v in store.value_mut(id).data_mut() {
            *v = center + rng.gen_range(-0.5..0.5);
        }
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn attention_invariants() -> Outcome {
    let t = Instant::now();
    let cfg = PipelineConfig::desk();
    let model_cfg = cfg.model_config().unwrap();
    let widths = model_cfg.backbone.representation_widths();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // softmax rows, both through the raw kernel and a multi-head layer
    let mut worst_row = 0.0f64;
    let mut store = ParamStore::new();
    let mh = MultiHead::new(&mut store, &mut rng, "mh", model_cfg.attention, m3fuse_core::layers::Init::FanIn).unwrap();
    randomize(&mut store, &mut rng);
    for trial in 0..50 {
        let mut g = Graph::new();
        let (batch, len) = (1 + trial % 4, 2 + trial % 17);
        let x = g.constant(random_tensor(&mut rng, batch * len, model_cfg.attention.d_model));
        let (_, weights) = mh.forward_with_weights(&mut g, &store, x, batch).unwrap();
        let d = 4 + trial % 5;
        let xs = g.constant(random_tensor(&mut rng, batch * len, d));
        let w = [0; 3].map(|_| {
            // wide weights push rows toward one-hot, the hard case for the sum
            let mut t = random_tensor(&mut rng, d, d);
            t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            g.constant(t)
        });
        let (_, raw) = attention(&mut g, xs, xs, w[0], w[1], w[2], batch, (d as f64).sqrt()).unwrap();
        for v in weights.into_iter().chain([raw]) {
            let value = g.value(v);
            let cols = *value.shape().last().unwrap();
            for row in value.data().chunks(cols) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    let mut store = ParamStore::new();
    let block = M3Block::new(&mut store, &mut rng, "m3", &widths, model_cfg.attention).unwrap();
    randomize(&mut store, &mut rng);

    // mutual relation: 100 random keypoint permutations
    let n = 48;
    let tokens = random_tensor(&mut rng, n, block.c_t());
    let run_mutual = |x: Tensor| {
        let mut g = Graph::new();
        let x = g.constant(x);
        let o = mutual_relation_layer(&mut g, &store, &block.mutual, x).unwrap();
        g.value(o).clone()
    };
    let base = run_mutual(tokens.clone());
    let mut equivariant = 0;
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        if bits(&permute_rows(&base, &perm)) == bits(&run_mutual(permute_rows(&tokens, &perm))) {
            equivariant += 1;
        }
    }

    // multi-rep/scale: perturbing one keypoint changes only its own row
    let reps: Vec<Tensor> = widths.iter().map(|&w| random_tensor(&mut rng, n, w)).collect();
    let run_multi = |reps: &[Tensor]| -> Vec<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<_> = reps.iter().map(|t| g.constant(t.clone())).collect();
        let reduced = feature_reduce(&mut g, &store, &block.reduce, &vars).unwrap();
        let out = multi_rep_scale_layer(&mut g, &store, &block.multi_rep, &reduced).unwrap();
        out.iter().map(|&v| g.value(v).clone()).collect()
    };
    let clean = run_multi(&reps);
    let mut leaks = 0;
    let mut inert = 0;
    let probes = 20;
    for _ in 0..probes {
        let k = rng.gen_range(0..n);
        let mut bumped = reps.clone();
        for t in &mut bumped {
            let c = t.cols();
            for v in &mut t.data_mut()[k * c..(k + 1) * c] {
                *v += rng.gen_range(-1.0..1.0);
            }
        }
        let out = run_multi(&bumped);
        let mut changed_self = false;
        for (a, b) in clean.iter().zip(&out) {
            for r in 0..n {
                let same = bits(&permute_rows(a, &[r])) == bits(&permute_rows(b, &[r]));
                if r == k {
                    changed_self |= !same;
                } else if !same {
                    leaks += 1;
                }
            }
        }
        inert += usize::from(!changed_self);
    }

    let elapsed = t.elapsed();
    outcome(
        worst_row <= 1e-12 && equivariant == 100 && leaks == 0 && inert == 0 && within(elapsed, 30),
        format!(
            "softmax |Σ−1| {worst_row:.1e} (≤ 1e-12); mutual relation equivariant {equivariant}/100 (bitwise); \
             multi-rep leaks {leaks}, unresponsive probes {inert} of {probes}; {elapsed:.1?}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Clouds mixing continuous points with lattice points and duplicates so
/// distance ties actually occur.
fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(n);
    for _ in 0..n {
        let p = match rng.gen_range(0..3) {
            0 => [0; 3].map(|_| rng.gen_range(-2.0..2.0)),
            1 => [0; 3].map(|_| rng.gen_range(-3..=3) as f64 * 0.5),
            _ if !pts.is_empty() => pts[rng.gen_range(0..pts.len())],
            _ => [0.0; 3],
        };
        pts.push(p);
    }
    pts
}

/// Recomputes every point's distance to the whole picked set each round;
/// ties go to the lowest index.
fn fps_reference(points: &[[f64; 3]], n: usize, seed: usize) -> Vec<usize> {
    let mut picked = vec![seed];
    while picked.len() < n.min(points.len()) {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..points.len() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked.iter().map(|&j| d2(points[i], points[j])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        picked.push(best.unwrap().0);
    }
    picked
}

fn radius_reference(points: &[[f64; 3]], c: [f64; 3], r: f64, max: usize) -> Vec<usize> {
    let mut hits: Vec<(f64, usize)> = (0..points.len()).map(|i| (d2(points[i], c), i)).filter(|h| h.0 <= r * r).collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    hits.into_iter().take(max).map(|h| h.1).collect()
}

fn nms_reference(boxes: &[(Box7, f64)], thr: f64, kind: IouKind) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let best = (0..boxes.len())
            .filter(|&i| alive[i])
            .fold(None, |acc: Option<usize>, i| match acc {
                Some(b) if boxes[b].1 >= boxes[i].1 => Some(b),
                _ => Some(i),
            });
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && kind.eval(&boxes[b].0, &boxes[i].0) > thr {
                alive[i] = false;
            }
        }
    }
    kept
}

/// The unique assignment consistent with "each detection, highest
/// confidence first, takes its best still-free ground truth", found by
/// enumerating every assignment.
fn matching_reference(dets: &[Detection], gts: &[GroundTruthBox], thr: f64) -> Vec<Vec<Option<usize>>> {
    let iou = |d: usize, g: usize| {
        if dets[d].class == gts[g].class {
            IouKind::Bev.eval(&dets[d].bbox, &gts[g].bbox)
        } else {
            0.0
        }
    };
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let base = gts.len() + 1;
    let mut consistent = Vec::new();
    for code in 0..base.pow(dets.len() as u32) {
        let mut c = code;
        let assign: Vec<Option<usize>> = (0..dets.len())
            .map(|_| {
                let v = c % base;
                c /= base;
                v.checked_sub(1)
            })
            .collect();
        let mut used = vec![false; gts.len()];
        let ok = order.iter().all(|&d| {
            let best = (0..gts.len())
                .filter(|&g| !used[g] && iou(d, g) >= thr)
                .fold(None, |acc: Option<usize>, g| match acc {
                    Some(a) if iou(d, a) >= iou(d, g) => Some(a),
                    _ => Some(g),
                });
            if let Some(g) = best {
                used[g] = true;
            }
            assign[d] == best
        });
        if ok {
            consistent.push(assign);
        }
    }
    consistent
}

fn random_box(rng: &mut ChaCha8Rng, spread: f64) -> Box7 {
    Box7::new(
        rng.gen_range(-spread..spread),
        rng.gen_range(-spread..spread),
        rng.gen_range(-0.3..0.3),
        rng.gen_range(1.0..4.0),
        rng.gen_range(1.0..2.0),
        rng.gen_range(0.8..2.0),
        rng.gen_range(-PI..PI),
    )
    .unwrap()
}

fn combinatorial_oracles() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut fps_ok, mut radius_ok, mut nms_ok, mut match_ok) = (0, 0, 0, 0);
    for _ in 0..1000 {
        let len = rng.gen_range(1..40);
        let pts = random_points(&mut rng, len);
        let n = rng.gen_range(1..=pts.len() + 2);
        let seed = rng.gen_range(0..pts.len());
        fps_ok += usize::from(furthest_point_sampling(&pts, n, seed).unwrap() == fps_reference(&pts, n, seed));
    }
    for _ in 0..1000 {
        let len = rng.gen_range(0..60);
        let pts = random_points(&mut rng, len);
        let r = [0.5, 0.75, 1.0, rng.gen_range(0.1..2.5)][rng.gen_range(0..4)];
        let index = NeighborIndex::new(pts.clone(), r);
        let c = if !pts.is_empty() && rng.gen_bool(0.5) {
            pts[rng.gen_range(0..pts.len())]
        } else {
            [0; 3].map(|_| rng.gen_range(-2.5..2.5))
        };
        let max = rng.gen_range(1..20);
        radius_ok += usize::from(index.radius_query(c, r, max) == radius_reference(&pts, c, r, max));
    }
    for _ in 0..1000 {
        let boxes: Vec<(Box7, f64)> = (0..rng.gen_range(0..25))
            .map(|_| (random_box(&mut rng, 3.0), rng.gen_range(0..10) as f64 / 10.0))
            .collect();
        let kind = if rng.gen_bool(0.5) { IouKind::Bev } else { IouKind::ThreeD };
        let thr = rng.gen_range(0.05..0.8);
        nms_ok += usize::from(nms(&boxes, thr, kind) == nms_reference(&boxes, thr, kind));
    }
    for _ in 0..1000 {
        let gts: Vec<GroundTruthBox> = (0..rng.gen_range(0..5))
            .map(|_| GroundTruthBox {
                bbox: random_box(&mut rng, 2.0),
                class: rng.gen_range(0..2),
                points_inside: 10,
                difficulty: Difficulty::Easy,
            })
            .collect();
        let dets: Vec<Detection> = (0..rng.gen_range(0..5))
            .map(|_| Detection {
                class: rng.gen_range(0..2),
                bbox: random_box(&mut rng, 2.0),
                confidence: rng.gen_range(0..5) as f64 / 5.0,
            })
            .collect();
        let thr = rng.gen_range(0.0..0.5);
        let reference = matching_reference(&dets, &gts, thr);
        let m = match_detections(&dets, &gts, thr, IouKind::Bev);
        match_ok += usize::from(reference.len() == 1 && m.det_match == reference[0]);
    }
    let elapsed = t.elapsed();
    outcome(
        [fps_ok, radius_ok, nms_ok, match_ok] == [1000; 4] && within(elapsed, 60),
        format!("exact agreement: fps {fps_ok}/1000, radius {radius_ok}/1000, nms {nms_ok}/1000, matching {match_ok}/1000; {elapsed:.1?}"),
    )
}

// ---------------------------------------------------------------- 5

fn gt_at(x: f64, theta: f64, points_inside: usize) -> GroundTruthBox {
    GroundTruthBox {
        bbox: Box7::new(x, 0.0, 0.0, 4.0, 1.5, 1.8, theta).unwrap(),
        class: 0,
        points_inside,
        difficulty: Difficulty::Easy,
    }
}

fn metric_correctness() -> Outcome {
    // score order TP, FP, TP, TP, FP against 4 ground truths:
    //   precision 1, 1/2, 2/3, 3/4, 3/5 at recall 1/4, 1/4, 1/2, 3/4, 3/4
    //   interpolated: 1 up to recall 1/4, 3/4 up to 3/4, 0 beyond
    //   R11: (3·1 + 5·3/4) / 11 = 27/44   R40: (10·1 + 20·3/4) / 40 = 5/8
    let events: Vec<Event> = [(0.9, true), (0.8, false), (0.7, true), (0.6, true), (0.5, false)]
        .into_iter()
        .map(|(score, tp)| Event { score, tp, weight: 1.0 })
        .collect();
    let curve = PrCurve::from_events(events, 4);
    let r11 = average_precision(&curve, ApMode::R11).unwrap();
    let r40 = average_precision(&curve, ApMode::R40).unwrap();
    let ap_ok = (r11 - 27.0 / 44.0).abs() <= 1e-12 && (r40 - 5.0 / 8.0).abs() <= 1e-12;

    // LEVEL_1 ⊆ LEVEL_2, on single boxes and on whole curves
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut subset_ok = (0..40).all(|p| {
        let g = gt_at(0.0, 0.0, p);
        !Subset::Level(Level::Level1).admits(&g) || Subset::Level(Level::Level2).admits(&g)
    });
    let scenes: Vec<SceneEval> = (0..30)
        .map(|_| {
            let gts: Vec<GroundTruthBox> = (0..4).map(|i| gt_at(6.0 * i as f64, 0.3, rng.gen_range(0..12))).collect();
            let mut dets = Vec::new();
            for g in &gts {
                if rng.gen_bool(0.7) {
                    dets.push(Detection {
                        class: 0,
                        bbox: g.bbox,
                        confidence: rng.gen_range(0.0..1.0),
                    });
                }
            }
            SceneEval {
                detections: dets,
                ground_truth: gts,
            }
        })
        .collect();
    let query = |subset| EvalQuery {
        class: 0,
        iou_threshold: 0.5,
        kind: IouKind::Bev,
        subset,
        range: None,
    };
    let c1 = class_curves(&scenes, &query(Subset::Level(Level::Level1)));
    let c2 = class_curves(&scenes, &query(Subset::Level(Level::Level2)));
    let count = |min: usize| scenes.iter().flat_map(|s| &s.ground_truth).filter(|g| g.points_inside > min).count();
    subset_ok &= c1.plain.num_gt == count(5) && c2.plain.num_gt == count(1) && c1.plain.num_gt <= c2.plain.num_gt;

    // heading weighting: exact headings vs flipped by π (same footprint)
    let flip = |scenes: &[SceneEval]| -> Vec<SceneEval> {
        scenes
            .iter()
            .map(|s| SceneEval {
                detections: s
                    .detections
                    .iter()
                    .map(|d| Detection {
                        bbox: Box7 {
                            theta: d.bbox.theta + PI,
                            ..d.bbox
                        },
                        ..*d
                    })
                    .collect(),
                ground_truth: s.ground_truth.clone(),
            })
            .collect()
    };
    let mut heading_ok = true;
    let mut report = Vec::new();
    for mode in [ApMode::R11, ApMode::R40] {
        let exact = class_curves(&scenes, &query(Subset::All));
        let flipped = class_curves(&flip(&scenes), &query(Subset::All));
        let (ap, aph) = (average_precision(&exact.plain, mode).unwrap(), average_precision(&exact.heading, mode).unwrap());
        let (ap_f, aph_f) = (average_precision(&flipped.plain, mode).unwrap(), average_precision(&flipped.heading, mode).unwrap());
        heading_ok &= ap == aph && aph_f == 0.0 && ap_f == ap && ap > 0.0;
        report.push(format!("{mode}: AP {ap:.4} APH {aph:.4} flipped APH {aph_f}"));
    }

    outcome(
        ap_ok && subset_ok && heading_ok,
        format!(
            "R11 {r11} vs 27/44, R40 {r40} vs 5/8; LEVEL_1 {} ⊆ LEVEL_2 {} gts; {}",
            c1.plain.num_gt,
            c2.plain.num_gt,
            report.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 6, 7

struct OverfitRun {
    ap_r40: f64,
    first_loss: f64,
    last_loss: f64,
    finite: bool,
    steps: usize,
    elapsed: Duration,
}

fn overfit(cfg: PipelineConfig) -> Result<OverfitRun, String> {
    let t = Instant::now();
    let scenes = generate_scenes(&cfg, cfg.seed, cfg.synth.scenes).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg.clone(), &scenes, 4).map_err(|e| e.to_string())?;
    let mut losses = Vec::with_capacity(cfg.optim.steps);
    trainer.run(cfg.optim.steps, |_, r| losses.push(r.total)).map_err(|e| e.to_string())?;
    let dets = detect_scenes(&trainer.model, &trainer.store, &scenes).map_err(|e| e.to_string())?;
    let metrics = compute_metrics(&cfg, &scenes, &dets);
    let class = &cfg.anchors.class_names[0];
    let window = 50.min(losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    Ok(OverfitRun {
        ap_r40: metrics.get(class, "all", "AP_R40").unwrap_or(0.0),
        first_loss: mean(&losses[..window]),
        last_loss: mean(&losses[losses.len() - window..]),
        finite: losses.iter().all(|l| l.is_finite()),
        steps: losses.len(),
        elapsed: t.elapsed(),
    })
}

fn describe(name: &str, r: &OverfitRun) -> String {
    format!(
        "{name}: AP_R40 {:.4} after {} steps, loss {:.3} → {:.3}, {:.0?}",
        r.ap_r40, r.steps, r.first_loss, r.last_loss, r.elapsed
    )
}

fn end_to_end_overfit() -> Outcome {
    let cfg = PipelineConfig::desk();
    let full = match overfit(cfg.clone()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("full M3 run failed: {e}")),
    };
    let mut base_cfg = cfg;
    base_cfg.transformer.disabled = true;
    let base = match overfit(base_cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("baseline run failed: {e}")),
    };
    // "still trains": finite throughout and the loss at least halves
    let base_trains = base.finite && base.last_loss < 0.5 * base.first_loss;
    outcome(
        full.ap_r40 >= 0.90 && full.steps <= 3000 && base_trains && within(full.elapsed + base.elapsed, 30 * 60),
        format!(
            "{} (gate ≥ 0.90); {} (trains: {base_trains})",
            describe("full M3 2×4", &full),
            describe("baseline", &base)
        ),
    )
}

fn robustness_sweep() -> Outcome {
    let mut cfg = PipelineConfig::desk();
    cfg.transformer.layers = 1;
    cfg.transformer.heads = 8;
    match overfit(cfg) {
        Ok(r) => outcome(r.ap_r40 >= 0.90 && r.steps <= 3000, format!("{} (gate ≥ 0.90)", describe("1×8", &r))),
        Err(e) => outcome(false, format!("1×8 run failed: {e}")),
    }
}

// ---------------------------------------------------------------- 8

fn cli(args: &[&str], dir: &Path, workers: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_m3fuse"))
        .args(args)
        .current_dir(dir)
        .env("M3FUSE_WORKERS", workers)
        .env_remove("M3FUSE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("m3fuse {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    matches!((std::fs::read(a), std::fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

fn determinism() -> Outcome {
    let run = || -> Result<Vec<(String, bool)>, String> {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let d = tmp.path();
        for (name, workers) in [("a", "1"), ("b", "3")] {
            cli(&["train", "--out", name, "--steps", "40"], d, workers)?;
            cli(&["eval", "--checkpoint", &format!("{name}/checkpoint.bin"), "--out", name], d, workers)?;
        }
        // interrupted run: 20 steps, then resume to 40
        cli(&["train", "--out", "c", "--steps", "20"], d, "1")?;
        cli(&["train", "--out", "c", "--steps", "40", "--resume", "c/checkpoint.bin"], d, "1")?;
        cli(&["eval", "--checkpoint", "c/checkpoint.bin", "--out", "c"], d, "1")?;
        let check = |x: &str, y: &str, f: &str| (format!("{x}/{f}={y}/{f}"), same_bytes(&d.join(x).join(f), &d.join(y).join(f)));
        Ok(vec![
            check("a", "b", "metrics.csv"),
            check("a", "b", "pr.csv"),
            check("a", "b", "checkpoint.bin"),
            check("a", "c", "checkpoint.bin"),
            check("a", "c", "loss.csv"),
            check("a", "c", "metrics.csv"),
        ])
    };
    match run() {
        Ok(checks) => {
            let pass = checks.iter().all(|c| c.1);
            let detail: Vec<String> = checks.iter().map(|(n, ok)| format!("{n} {}", if *ok { "identical" } else { "DIFFERS" })).collect();
            outcome(pass, detail.join(", "))
        }
        Err(e) => outcome(false, e),
    }
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u8, &str, fn() -> Outcome); 8] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "geometry oracle", geometry_oracle),
        (3, "attention invariants", attention_invariants),
        (4, "combinatorial oracles", combinatorial_oracles),
        (5, "metric correctness", metric_correctness),
        (6, "end-to-end overfit", end_to_end_overfit),
        (7, "head-configuration sweep", robustness_sweep),
        (8, "determinism", determinism),
    ];
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let o = run();
        let mut out = std::io::stdout().lock();
        writeln!(out, "criterion {id} {name}: {} — {}", if o.pass { "PASS" } else { "FAIL" }, o.detail).unwrap();
        out.flush().unwrap();
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
