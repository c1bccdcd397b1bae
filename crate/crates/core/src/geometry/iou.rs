use std::cmp::Ordering;

use super::Box7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IouKind {
    Bev,
    ThreeD,
}

impl IouKind {
    pub fn eval(self, a: &Box7, b: &Box7) -> f64 {
        match self {
            IouKind::Bev => iou_bev(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }
}

/// Footprint corners in counter-clockwise order.
pub fn bev_corners(b: &Box7) -> [[f64; 2]; 4] {
    let hl = 0.5 * b.l;
    let hw = 0.5 * b.w;
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    let (s, c) = b.theta.sin_cos();
    local.map(|[u, v]| [b.x + c * u - s * v, b.y + s * u + c * v])
}

/// Shoelace area (positive for counter-clockwise polygons).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        twice += x0 * y1 - x1 * y0;
    }
    0.5 * twice
}

fn cross(o: [f64; 2], a: [f64; 2], p: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])
}

/// Sutherland–Hodgman: clips `subject` against the convex counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let denom = cp - cq;
    if denom == 0.0 {
        return q;
    }
    let t = cp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn canonical<'a>(a: &'a Box7, b: &'a Box7) -> (&'a Box7, &'a Box7) {
    let ord = a
        .to_array()
        .iter()
        .zip(b.to_array().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal);
    if ord == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    }
}

/// Area of the intersection of the two rotated footprints.
pub fn bev_intersection_area(a: &Box7, b: &Box7) -> f64 {
    let (a, b) = canonical(a, b);
    let reach = 0.5 * (a.diagonal() + b.diagonal());
    if (a.x - b.x).hypot(a.y - b.y) > reach {
        return 0.0;
    }
    let poly = clip_convex(&bev_corners(a), &bev_corners(b));
    polygon_area(&poly).max(0.0)
}

/// Rotated-rectangle IoU in the ground plane.
pub fn iou_bev(a: &Box7, b: &Box7) -> f64 {
    if a == b {
        return 1.0;
    }
    let (a, b) = canonical(a, b);
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU of two upright boxes.
pub fn iou_3d(a: &Box7, b: &Box7) -> f64 {
    if a == b {
        return 1.0;
    }
    let (a, b) = canonical(a, b);
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
