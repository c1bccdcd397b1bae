use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn b(x: f64, y: f64, z: f64, l: f64, h: f64, w: f64, t: f64) -> Box7 {
    Box7::new(x, y, z, l, h, w, t).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> Box7 {
    b(
        rng.gen_range(-5.0..5.0),
        rng.gen_range(-5.0..5.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(0.5..5.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(-PI..PI),
    )
}

fn nearby_box(rng: &mut ChaCha8Rng, a: &Box7) -> Box7 {
    b(
        a.x + rng.gen_range(-1.5..1.5),
        a.y + rng.gen_range(-1.5..1.5),
        a.z + rng.gen_range(-0.8..0.8),
        rng.gen_range(0.5..5.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(-PI..PI),
    )
}

/// Jittered-grid Monte-Carlo estimate of (BEV IoU, 3D IoU): samples are
/// spread over `a`'s volume and tested for membership in `b`.
fn monte_carlo_iou(a: &Box7, other: &Box7, per_axis_bev: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let n = per_axis_bev;
    let mut hits = 0usize;
    for i in 0..n {
        for j in 0..n {
            let u = ((i as f64 + rng.gen::<f64>()) / n as f64 - 0.5) * a.l;
            let v = ((j as f64 + rng.gen::<f64>()) / n as f64 - 0.5) * a.w;
            let p = a.local_to_world([u, v, 0.0]);
            let (lx, ly) = other.to_local(p[0], p[1]);
            if lx.abs() <= 0.5 * other.l && ly.abs() <= 0.5 * other.w {
                hits += 1;
            }
        }
    }
    let inter_bev = a.bev_area() * hits as f64 / (n * n) as f64;
    let bev = inter_bev / (a.bev_area() + other.bev_area() - inter_bev);

    let m = (n as f64).powf(2.0 / 3.0).round() as usize;
    let mut hits3 = 0usize;
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                let u = ((i as f64 + rng.gen::<f64>()) / m as f64 - 0.5) * a.l;
                let v = ((j as f64 + rng.gen::<f64>()) / m as f64 - 0.5) * a.w;
                let h = ((k as f64 + rng.gen::<f64>()) / m as f64 - 0.5) * a.h;
                if other.contains(a.local_to_world([u, v, h])) {
                    hits3 += 1;
                }
            }
        }
    }
    let inter3 = a.volume() * hits3 as f64 / (m * m * m) as f64;
    let iou3 = inter3 / (a.volume() + other.volume() - inter3);
    (bev, iou3)
}

#[test]
fn encode_identity_and_hand_values() {
    let a = b(0.0, 0.0, 0.0, 3.0, 1.5, 1.6, 0.0);
    assert_eq!(encode_box(&a, &a).unwrap(), BoxDelta::default());

    let gt = b(1.0, 0.0, 0.0, 3.0, 1.5, 1.6, 0.0);
    let d = encode_box(&gt, &a).unwrap();
    // 1 / sqrt(1.6² + 3²) = 1 / sqrt(11.56) = 1 / 3.4
    assert!((d.dx - 0.294_117_647_058_823_5).abs() < 1e-12);
    assert_eq!([d.dy, d.dz, d.dl, d.dh, d.dw, d.dtheta], [0.0; 6]);

    let rotated = Box7 {
        theta: 3.5,
        ..a
    };
    let d = encode_box(&rotated, &a).unwrap();
    assert!((d.dtheta - (3.5 - 2.0 * PI)).abs() < 1e-12);
    assert!((d.dtheta + 2.7832).abs() < 1e-4);
}

#[test]
fn encode_rejects_nonpositive_gt_dims() {
    let a = b(0.0, 0.0, 0.0, 3.0, 1.5, 1.6, 0.0);
    let bad = Box7 { l: 0.0, ..a };
    assert!(matches!(encode_box(&bad, &a), Err(GeometryError::InvalidBox(_))));
}

#[test]
fn decode_special_cases() {
    let a = b(2.0, -1.0, 0.5, 3.9, 1.56, 1.6, 0.3);
    assert_eq!(decode_box(&BoxDelta::default(), &a).unwrap(), a);
    let doubled = decode_box(
        &BoxDelta {
            dl: 2f64.ln(),
            ..Default::default()
        },
        &a,
    )
    .unwrap();
    assert!((doubled.l - 2.0 * a.l).abs() < 1e-12);
    let overflow = BoxDelta {
        dw: 1e6,
        ..Default::default()
    };
    assert!(matches!(decode_box(&overflow, &a), Err(GeometryError::Decode(_))));
}

#[test]
fn round_trip_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let gt = random_box(&mut rng);
        let anchor = random_box(&mut rng);
        let back = decode_box(&encode_box(&gt, &anchor).unwrap(), &anchor).unwrap();
        for (u, v) in [(gt.x, back.x), (gt.y, back.y), (gt.z, back.z)] {
            assert!((u - v).abs() < 1e-9);
        }
        for (u, v) in [(gt.l, back.l), (gt.h, back.h), (gt.w, back.w)] {
            assert!(((u - v) / u).abs() < 1e-9);
        }
        assert!(wrap_angle(gt.theta - back.theta).abs() < 1e-9);
    }
}

#[test]
fn iou_closed_forms() {
    let a = b(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
    assert_eq!(iou_bev(&a, &a), 1.0);
    assert_eq!(iou_3d(&a, &a), 1.0);
    let far = b(100.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
    assert_eq!(iou_bev(&a, &far), 0.0);
    let shifted = b(0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
    assert!((iou_bev(&a, &shifted) - 1.0 / 3.0).abs() < 1e-12);

    let low = b(0.0, 0.0, 1.0, 2.0, 2.0, 1.0, 0.4);
    let high = b(0.0, 0.0, 2.0, 2.0, 2.0, 1.0, 0.4);
    assert!((iou_3d(&low, &high) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn iou_matches_monte_carlo_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..40 {
        let a = random_box(&mut rng);
        let other = nearby_box(&mut rng, &a);
        let (bev, v3) = monte_carlo_iou(&a, &other, 447, &mut rng);
        assert!((iou_bev(&a, &other) - bev).abs() < 3e-3, "{a:?} {other:?}");
        assert!((iou_3d(&a, &other) - v3).abs() < 3e-3, "{a:?} {other:?}");
    }
}

#[test]
fn nms_small_cases() {
    assert!(nms(&[], 0.5, IouKind::Bev).is_empty());
    let a = b(0.0, 0.0, 0.0, 4.0, 1.5, 1.6, 0.0);
    assert_eq!(nms(&[(a, 0.3)], 0.5, IouKind::Bev), vec![0]);
    assert_eq!(nms(&[(a, 0.8), (a, 0.9)], 0.7, IouKind::Bev), vec![1]);
}

/// Repeatedly takes the best remaining box and deletes everything it
/// overlaps beyond the threshold.
fn reference_nms(boxes: &[(Box7, f64)], thr: f64, kind: IouKind) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining {
            if boxes[i].1 > boxes[best].1 || (boxes[i].1 == boxes[best].1 && i < best) {
                best = i;
            }
        }
        kept.push(best);
        remaining.retain(|&i| i != best && kind.eval(&boxes[best].0, &boxes[i].0) <= thr);
    }
    kept
}

#[test]
fn nms_matches_reference_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for round in 0..30 {
        let boxes: Vec<(Box7, f64)> = (0..50)
            .map(|_| {
                let mut bx = random_box(&mut rng);
                bx.x *= 0.3;
                bx.y *= 0.3;
                (bx, (rng.gen_range(0..20) as f64) / 20.0)
            })
            .collect();
        let kind = if round % 2 == 0 { IouKind::Bev } else { IouKind::ThreeD };
        let thr = rng.gen_range(0.1..0.8);
        let kept = nms(&boxes, thr, kind);
        assert_eq!(kept, reference_nms(&boxes, thr, kind));
        for (i, &p) in kept.iter().enumerate() {
            for &q in &kept[i + 1..] {
                assert!(kind.eval(&boxes[p].0, &boxes[q].0) <= thr);
            }
        }
    }
}

fn arb_box() -> impl Strategy<Value = Box7> {
    (
        -5.0f64..5.0,
        -5.0f64..5.0,
        -1.0f64..1.0,
        0.3f64..5.0,
        0.3f64..3.0,
        0.3f64..3.0,
        -PI..PI,
    )
        .prop_map(|(x, y, z, l, h, w, t)| b(x, y, z, l, h, w, t))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
        prop_assert_eq!(iou_bev(&a, &c).to_bits(), iou_bev(&c, &a).to_bits());
        prop_assert_eq!(iou_3d(&a, &c).to_bits(), iou_3d(&c, &a).to_bits());
        prop_assert!((0.0..=1.0).contains(&iou_bev(&a, &c)));
        prop_assert!(iou_3d(&a, &c) <= 1.0);
        prop_assert_eq!(iou_bev(&a, &a), 1.0);
    }

    #[test]
    fn iou_is_rigid_motion_invariant(
        a in arb_box(), c in arb_box(),
        tx in -20.0f64..20.0, ty in -20.0f64..20.0, tz in -2.0f64..2.0, yaw in -PI..PI,
    ) {
        let (s, co) = yaw.sin_cos();
        let move_box = |bx: &Box7| b(
            co * bx.x - s * bx.y + tx,
            s * bx.x + co * bx.y + ty,
            bx.z + tz,
            bx.l, bx.h, bx.w,
            bx.theta + yaw,
        );
        let (a2, c2) = (move_box(&a), move_box(&c));
        prop_assert!((iou_bev(&a, &c) - iou_bev(&a2, &c2)).abs() < 1e-9);
        prop_assert!((iou_3d(&a, &c) - iou_3d(&a2, &c2)).abs() < 1e-9);
    }

    #[test]
    fn encode_decode_round_trip(gt in arb_box(), anchor in arb_box()) {
        let back = decode_box(&encode_box(&gt, &anchor).unwrap(), &anchor).unwrap();
        prop_assert!((gt.x - back.x).abs() < 1e-9);
        prop_assert!((gt.y - back.y).abs() < 1e-9);
        prop_assert!((gt.z - back.z).abs() < 1e-9);
        prop_assert!(((gt.l - back.l) / gt.l).abs() < 1e-9);
        prop_assert!(wrap_angle(gt.theta - back.theta).abs() < 1e-9);
    }
}
