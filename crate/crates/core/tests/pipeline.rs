use m3fuse_core::geometry::{decode_box, encode_box, iou_3d, iou_bev, nms, Box7, IouKind};
use m3fuse_core::pointcloud::{
    brute_force_radius_query, furthest_point_sampling, voxelize, Bounds, NeighborIndex, Point, PointCloud,
};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = Box7> {
    (
        -20.0..20.0f64,
        -20.0..20.0f64,
        -2.0..2.0f64,
        0.5..5.0f64,
        0.5..3.0f64,
        0.5..3.0f64,
        -3.1..3.1f64,
    )
        .prop_map(|(x, y, z, l, h, w, t)| Box7::new(x, y, z, l, h, w, t).unwrap())
}

proptest! {
    #[test]
    fn encode_decode_round_trips(gt in arb_box(), anchor in arb_box()) {
        let back = decode_box(&encode_box(&gt, &anchor).unwrap(), &anchor).unwrap();
        for (a, b) in gt.to_array().iter().zip(back.to_array()) {
            prop_assert!((a - b).abs() < 1e-9, "{gt:?} vs {back:?}");
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        for f in [iou_bev, iou_3d] {
            let ab = f(&a, &b);
            prop_assert!((ab - f(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        }
        prop_assert!((iou_bev(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nms_survivors_do_not_overlap(
        boxes in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..30),
        t in 0.05..0.9f64,
    ) {
        let kept = nms(&boxes, t, IouKind::Bev);
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(boxes[a].1 >= boxes[b].1);
                prop_assert!(iou_bev(&boxes[a].0, &boxes[b].0) <= t);
            }
        }
    }
}

fn scene(n: usize) -> PointCloud {
    let pts = (0..n)
        .map(|i| {
            let t = i as f64 * 0.37;
            Point::new(10.0 + 8.0 * t.sin(), 6.0 * (1.3 * t).cos(), (0.7 * t).sin(), 0.5)
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

#[test]
fn voxelize_counts_every_point_in_range() {
    let cloud = scene(500);
    let range = Bounds::new([0.0, -8.0, -2.0], [20.0, 8.0, 2.0]).unwrap();
    let grid = voxelize(&cloud, &range, [0.5, 0.5, 0.5]).unwrap();
    let total: usize = grid.cells.values().map(|c| c.count).sum();
    assert_eq!(total, cloud.crop(&range).len());
    assert_eq!(grid.extents, [40, 32, 8]);
}

#[test]
fn sampled_keypoints_feed_radius_queries() {
    let cloud = scene(400);
    let pos = cloud.positions();
    let keys = furthest_point_sampling(&pos, 32, 0).unwrap();
    assert_eq!(keys.len(), 32);
    let mut sorted = keys.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 32);

    let index = NeighborIndex::new(pos.clone(), 1.0);
    for &k in &keys {
        let fast = index.radius_query(pos[k], 1.0, 8);
        assert_eq!(fast, brute_force_radius_query(&pos, pos[k], 1.0, 8));
        assert!(fast.contains(&k));
    }
}
