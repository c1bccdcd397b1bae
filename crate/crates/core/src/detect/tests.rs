use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::BevMap;
use crate::geometry::{decode_box, encode_box, iou_bev, BoxDelta};
use crate::numerics::{grad_check, grad_check_subset, Graph, ParamStore, Tensor};
use crate::pointcloud::PointMlp;

fn b(x: f64, y: f64, z: f64, l: f64, h: f64, w: f64, t: f64) -> Box7 {
    Box7::new(x, y, z, l, h, w, t).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn car_anchors(rows: usize, cols: usize) -> AnchorSet {
    generate_anchors(rows, cols, [0.0, -5.0], [1.0, 1.0], &[[3.9, 1.56, 1.6]], &[-0.5]).unwrap()
}

#[test]
fn anchor_count_and_raster() {
    let a = car_anchors(2, 2);
    assert_eq!(a.len(), 8);
    let a = generate_anchors(5, 3, [2.0, -4.0], [0.8, 0.5], &[[3.9, 1.56, 1.6], [0.8, 1.7, 0.6]], &[-1.0, -0.6]).unwrap();
    assert_eq!(a.len(), 5 * 3 * 2 * 2);
    for (idx, bx) in a.boxes.iter().enumerate() {
        let pixel = idx / a.per_pixel();
        let i = ((bx.x - 2.0) / 0.8 - 0.5).round() as usize;
        let j = ((bx.y + 4.0) / 0.5 - 0.5).round() as usize;
        assert_eq!(i * 3 + j, pixel);
        assert_eq!(a.classes[idx], (idx / 2) % 2);
        assert_eq!(bx.theta, ANCHOR_YAWS[idx % 2]);
    }
}

#[test]
fn anchor_dims_are_class_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let gts: Vec<(usize, Box7)> = (0..40)
        .map(|i| {
            (
                i % 2,
                b(0.0, 0.0, rng.gen_range(-1.0..0.0), rng.gen_range(3.0..4.5), rng.gen_range(1.3..1.8), rng.gen_range(1.4..1.9), 0.0),
            )
        })
        .collect();
    let (dims, z) = class_statistics(&gts, 3, ([1.0, 1.0, 1.0], 0.0));
    for c in 0..2 {
        let members: Vec<&Box7> = gts.iter().filter(|(k, _)| *k == c).map(|(_, bx)| bx).collect();
        let n = members.len() as f64;
        let mean = |f: fn(&Box7) -> f64| members.iter().map(|bx| f(bx)).sum::<f64>() / n;
        assert!((dims[c][0] - mean(|bx| bx.l)).abs() < 1e-9);
        assert!((dims[c][1] - mean(|bx| bx.h)).abs() < 1e-9);
        assert!((dims[c][2] - mean(|bx| bx.w)).abs() < 1e-9);
        assert!((z[c] - mean(|bx| bx.z)).abs() < 1e-9);
    }
    assert_eq!(dims[2], [1.0, 1.0, 1.0]);
    let anchors = generate_anchors(2, 2, [0.0, 0.0], [1.0, 1.0], &dims, &z).unwrap();
    assert_eq!([anchors.boxes[0].l, anchors.boxes[0].h, anchors.boxes[0].w], dims[0]);
}

#[test]
fn assignment_simple_cases() {
    let anchors = car_anchors(6, 10);
    let t = assign_targets(&anchors, &[], 0.6, 0.45);
    assert_eq!(t.num_positive(), 0);
    assert!(t.labels.iter().all(|l| *l == AnchorLabel::Negative));

    let gt = anchors.boxes[37];
    let t = assign_targets(&anchors, &[(0, gt)], 0.6, 0.45);
    assert_eq!(t.labels[37], AnchorLabel::Positive);
    assert_eq!(t.deltas[37], BoxDelta::default());
    assert_eq!(t.matched[37], Some(0));
}

/// Straightforward re-statement of the labeling rule over all pairs.
fn reference_assignment(anchors: &AnchorSet, gts: &[(usize, Box7)], pos: f64, neg: f64) -> (Vec<AnchorLabel>, Vec<Option<usize>>) {
    let iou = |a: usize, g: usize| {
        if anchors.classes[a] == gts[g].0 {
            iou_bev(&anchors.boxes[a], &gts[g].1)
        } else {
            0.0
        }
    };
    let mut labels = Vec::new();
    let mut matched = Vec::new();
    for a in 0..anchors.len() {
        let same: Vec<usize> = (0..gts.len()).filter(|&g| gts[g].0 == anchors.classes[a]).collect();
        let max = same.iter().map(|&g| iou(a, g)).fold(0.0, f64::max);
        let arg = same.iter().copied().find(|&g| iou(a, g) == max);
        if !same.is_empty() && max >= pos {
            labels.push(AnchorLabel::Positive);
            matched.push(arg);
        } else if max >= neg {
            labels.push(AnchorLabel::Ignore);
            matched.push(None);
        } else {
            labels.push(AnchorLabel::Negative);
            matched.push(None);
        }
    }
    for g in 0..gts.len() {
        let max = (0..anchors.len()).map(|a| iou(a, g)).fold(0.0, f64::max);
        if max > 0.0 {
            let a = (0..anchors.len()).find(|&a| iou(a, g) == max).unwrap();
            labels[a] = AnchorLabel::Positive;
            matched[a] = Some(g);
        }
    }
    (labels, matched)
}

#[test]
fn assignment_matches_reference_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let anchors = generate_anchors(8, 8, [0.0, -8.0], [2.0, 2.0], &[[3.9, 1.56, 1.6], [0.8, 1.7, 0.6]], &[-0.5, -0.4]).unwrap();
    for _ in 0..20 {
        let gts: Vec<(usize, Box7)> = (0..rng.gen_range(1..6))
            .map(|_| {
                let c = rng.gen_range(0..2);
                let (l, w) = if c == 0 { (3.9, 1.6) } else { (0.8, 0.6) };
                (
                    c,
                    b(
                        rng.gen_range(0.0..16.0),
                        rng.gen_range(-8.0..8.0),
                        -0.5,
                        l * rng.gen_range(0.8..1.2),
                        1.5,
                        w * rng.gen_range(0.8..1.2),
                        rng.gen_range(-PI..PI),
                    ),
                )
            })
            .collect();
        let t = assign_targets(&anchors, &gts, 0.6, 0.45);
        let (labels, matched) = reference_assignment(&anchors, &gts, 0.6, 0.45);
        assert_eq!(t.labels, labels);
        assert_eq!(t.matched, matched);
        for (a, m) in t.matched.iter().enumerate() {
            match m {
                Some(g) => assert_eq!(t.deltas[a], encode_box(&gts[*g].1, &anchors.boxes[a]).unwrap()),
                None => assert_eq!(t.deltas[a], BoxDelta::default()),
            }
        }
        for (g, (c, gt)) in gts.iter().enumerate() {
            let overlaps = (0..anchors.len()).any(|a| anchors.classes[a] == *c && iou_bev(&anchors.boxes[a], gt) > 0.0);
            if overlaps {
                assert!(t.matched.iter().any(|m| *m == Some(g)), "gt {g} has no positive anchor");
            }
        }
    }
}

fn bev_map(g: &mut Graph, store: &ParamStore, rows: usize, cols: usize, c: usize) -> BevMap {
    BevMap {
        features: g.param_named(store, "bev").unwrap(),
        rows,
        cols,
        channels: c,
    }
}

#[test]
fn zero_rpn_heads_reproduce_anchors() {
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    let mut store = ParamStore::new();
    let anchors = car_anchors(3, 4);
    let head = RpnHead::new(&mut store, &mut rng, "rpn", 5, 1, anchors.per_pixel()).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).data_mut().fill(0.0);
    }
    store.insert("bev", random_tensor(&mut rng, &[12, 5])).unwrap();
    let mut g = Graph::new();
    let bev = bev_map(&mut g, &store, 3, 4, 5);
    let out = rpn_forward(&mut g, &store, &head, &bev).unwrap();
    assert_eq!(g.value(out.logits).len() + g.value(out.deltas).len(), anchors.len() * (1 + 7));
    assert!(g.value(out.logits).data().iter().all(|&v| v == 0.0));
    let cfg = ProposalConfig {
        pre_nms: 1000,
        top_k: 1000,
        nms_threshold: 1.0,
    };
    let props = decode_proposals(g.value(out.logits).data(), g.value(out.deltas).data(), &anchors, &cfg);
    assert_eq!(props.len(), anchors.len());
    for (i, p) in props.iter().enumerate() {
        assert_eq!(p.anchor, i);
        assert_eq!(p.bbox, anchors.boxes[i]);
        assert_eq!(p.objectness, 0.5);
    }
}

#[test]
fn rpn_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(84);
    let mut store = ParamStore::new();
    let head = RpnHead::new(&mut store, &mut rng, "rpn", 4, 2, 4).unwrap();
    store.insert("bev", random_tensor(&mut rng, &[6, 4])).unwrap();
    let probe_l = random_tensor(&mut rng, &[24, 2]);
    let probe_d = random_tensor(&mut rng, &[24, 7]);
    let report = grad_check(
        |g, s| {
            let bev = bev_map(g, s, 2, 3, 4);
            let out = rpn_forward(g, s, &head, &bev)?;
            let pl = g.constant(probe_l.clone());
            let pd = g.constant(probe_d.clone());
            let sig = g.sigmoid(out.logits);
            let a = g.mul(sig, pl)?;
            let d = g.mul(out.deltas, pd)?;
            let a = g.sum_all(a)?;
            let d = g.sum_all(d)?;
            g.add(a, d)
        },
        &store,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn proposals_rank_and_validity() {
    let mut rng = ChaCha8Rng::seed_from_u64(85);
    let anchors = car_anchors(4, 4);
    let mut logits: Vec<f64> = (0..anchors.len()).map(|_| rng.gen_range(-3.0..0.0)).collect();
    logits[11] = 6.0;
    let deltas: Vec<f64> = (0..anchors.len() * 7).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let cfg = ProposalConfig {
        pre_nms: 20,
        top_k: 5,
        nms_threshold: 0.7,
    };
    let props = decode_proposals(&logits, &deltas, &anchors, &cfg);
    assert_eq!(props[0].anchor, 11);
    assert!(props.len() <= 5);
    for p in &props {
        p.bbox.validate().unwrap();
        assert!((0.0..=1.0).contains(&p.objectness));
    }
    for (i, p) in props.iter().enumerate() {
        for q in &props[i + 1..] {
            assert!(iou_bev(&p.bbox, &q.bbox) <= 0.7);
            assert!(p.objectness >= q.objectness);
        }
    }
    // an undecodable delta is skipped rather than reported
    let mut bad = deltas.clone();
    bad[11 * 7 + 3] = 1e6;
    let props = decode_proposals(&logits, &bad, &anchors, &cfg);
    assert!(props.iter().all(|p| p.anchor != 11));
}

fn pool_fixture(seed: u64) -> (ParamStore, PointMlp, Tensor, Vec<[f64; 3]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mlp = PointMlp::new(&mut store, &mut rng, "roi", 5, true, &[6]).unwrap();
    let kps: Vec<[f64; 3]> = (0..40)
        .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)])
        .collect();
    let feats = random_tensor(&mut rng, &[40, 5]);
    (store, mlp, feats, kps)
}

fn pool(store: &ParamStore, mlp: &PointMlp, feats: &Tensor, kps: &[[f64; 3]], props: &[Box7]) -> Tensor {
    let index = KeypointIndex::new(kps, 1.0);
    let grouping = index.grouping(props, 2, 1.0, 4);
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let out = roi_grid_pool(&mut g, store, mlp, f, &index, &grouping, 8).unwrap();
    g.value(out).clone()
}

#[test]
fn roi_pool_far_proposal_is_zero() {
    let (store, mlp, feats, kps) = pool_fixture(86);
    let props = [b(0.0, 0.0, 0.0, 3.9, 1.5, 1.6, 0.3), b(50.0, 50.0, 0.0, 3.9, 1.5, 1.6, 0.0)];
    let out = pool(&store, &mlp, &feats, &kps, &props);
    assert_eq!(out.shape(), &[2, 8 * 6]);
    assert!(out.row(1).iter().all(|&v| v == 0.0));
    assert!(out.row(0).iter().any(|&v| v != 0.0));
}

#[test]
fn roi_pool_rigid_rotation_about_proposal() {
    let (store, mlp, feats, kps) = pool_fixture(87);
    let prop = b(0.4, -0.2, 0.1, 3.9, 1.5, 1.6, 0.3);
    let base = pool(&store, &mlp, &feats, &kps, &[prop]);
    for yaw in [0.7, -2.1, 3.0] {
        let (s, c) = f64::sin_cos(yaw);
        let rot = |p: [f64; 3]| {
            let (dx, dy) = (p[0] - prop.x, p[1] - prop.y);
            [prop.x + c * dx - s * dy, prop.y + s * dx + c * dy, p[2]]
        };
        let kps2: Vec<[f64; 3]> = kps.iter().map(|p| rot(*p)).collect();
        let prop2 = b(prop.x, prop.y, prop.z, prop.l, prop.h, prop.w, prop.theta + yaw);
        let out = pool(&store, &mlp, &feats, &kps2, &[prop2]);
        for (a, bb) in base.data().iter().zip(out.data()) {
            assert!((a - bb).abs() < 1e-9);
        }
    }
}

#[test]
fn roi_pool_ignores_keypoint_storage_order() {
    let (store, mlp, feats, kps) = pool_fixture(88);
    let props = [b(0.0, 0.5, 0.0, 3.9, 1.5, 1.6, 1.1), b(-1.0, -1.0, 0.2, 2.0, 1.0, 1.0, -0.4)];
    let base = pool(&store, &mlp, &feats, &kps, &props);
    let mut rng = ChaCha8Rng::seed_from_u64(89);
    let mut perm: Vec<usize> = (0..kps.len()).collect();
    perm.shuffle(&mut rng);
    let kps2: Vec<[f64; 3]> = perm.iter().map(|&i| kps[i]).collect();
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| feats.row(i).to_vec()).collect();
    let out = pool(&store, &mlp, &Tensor::from_rows(&rows).unwrap(), &kps2, &props);
    assert_eq!(base, out);
}

#[test]
fn zero_refinement_head_keeps_proposal() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut store = ParamStore::new();
    let head = RcnnHead::new(&mut store, &mut rng, "rcnn", 12, 8).unwrap();
    for id in head.reg.params() {
        store.value_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let scaled: Vec<f64> = random_tensor(&mut rng, &[3, 12]).data().iter().map(|v| v * 50.0).collect();
    let x = g.constant(Tensor::new(vec![3, 12], scaled).unwrap());
    let out = rcnn_refine(&mut g, &store, &head, x).unwrap();
    let prop = b(1.0, 2.0, -0.5, 3.9, 1.5, 1.6, 0.4);
    for r in 0..3 {
        let d: [f64; 7] = g.value(out.deltas).row(r).try_into().unwrap();
        assert_eq!(decode_box(&BoxDelta::from_array(d), &prop).unwrap(), prop);
    }
    let conf = g.sigmoid(out.conf_logits);
    assert!(g.value(conf).data().iter().all(|&c| c > 0.0 && c < 1.0));
}

#[test]
fn rcnn_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut store = ParamStore::new();
    let head = RcnnHead::new(&mut store, &mut rng, "rcnn", 10, 6).unwrap();
    store.insert("x", random_tensor(&mut rng, &[4, 10])).unwrap();
    let probe = random_tensor(&mut rng, &[4, 7]);
    let report = grad_check_subset(
        |g, s| {
            let x = g.param_named(s, "x")?;
            let out = rcnn_refine(g, s, &head, x)?;
            let p = g.constant(probe.clone());
            let d = g.mul(out.deltas, p)?;
            let c = g.sigmoid(out.conf_logits);
            let d = g.sum_all(d)?;
            let c = g.sum_all(c)?;
            g.add(d, c)
        },
        &store,
        1e-5,
        1e-4,
        Some(20),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn iou_confidence_target_cases() {
    let gt = b(0.0, 0.0, 0.0, 3.0, 1.5, 1.6, 0.0);
    assert_eq!(iou_confidence_target(&gt, &[gt], 0.25, 0.75), 1.0);
    let far = b(30.0, 0.0, 0.0, 3.0, 1.5, 1.6, 0.0);
    assert_eq!(iou_confidence_target(&far, &[gt], 0.25, 0.75), 0.0);
    assert_eq!(iou_confidence_target(&gt, &[], 0.25, 0.75), 0.0);
    // Shifting by l/3 along the heading gives IoU (l − d)/(l + d) = 1/2.
    let half = b(1.0, 0.0, 0.0, 3.0, 1.5, 1.6, 0.0);
    assert!((iou_confidence_target(&half, &[far, gt], 0.25, 0.75) - 0.5).abs() < 1e-12);
}

#[test]
fn roi_sampling_quota_and_targets() {
    let gt = b(0.0, 0.0, 0.0, 3.9, 1.5, 1.6, 0.0);
    let mk = |x: f64, s: f64| Proposal {
        bbox: b(x, 0.0, 0.0, 3.9, 1.5, 1.6, 0.0),
        objectness: s,
        class: 0,
        anchor: 0,
    };
    let props: Vec<Proposal> = (0..10).map(|i| mk(i as f64 * 0.3, 1.0 - i as f64 * 0.05)).collect();
    let cfg = RoiSampling {
        rois_per_scene: 6,
        fg_fraction: 0.5,
        fg_iou: 0.55,
        iou_low: 0.25,
        iou_high: 0.75,
        include_gt: true,
    };
    let s = sample_rois(&props, &[gt], &cfg);
    assert_eq!(s.proposals.len(), 6);
    let fg = s.matched.iter().filter(|m| m.is_some_and(|(_, v)| v >= 0.55)).count();
    assert_eq!(fg, 3);
    for (p, t) in s.proposals.iter().zip(&s.conf_targets) {
        assert_eq!(*t, iou_confidence_target(p, &[gt], 0.25, 0.75));
    }
    let none = sample_rois(&props, &[], &cfg);
    assert!(none.matched.iter().all(Option::is_none));
    assert!(none.conf_targets.iter().all(|&t| t == 0.0));
}
