use std::collections::HashMap;

use super::dist2;

/// Uniform-grid spatial hash for fixed-radius queries.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    cell: f64,
    points: Vec<[f64; 3]>,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl NeighborIndex {
    /// `cell` is normally the query radius.
    pub fn new(points: Vec<[f64; 3]>, cell: f64) -> Self {
        let cell = if cell > 0.0 && cell.is_finite() { cell } else { 1.0 };
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(*p, cell)).or_default().push(i);
        }
        Self { cell, points, buckets }
    }

    fn key(p: [f64; 3], cell: f64) -> [i64; 3] {
        p.map(|v| (v / cell).floor() as i64)
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices within Euclidean distance `r` of `center`, nearest first
    /// (distance ties: lowest index), truncated to `max_count`.
    pub fn radius_query(&self, center: [f64; 3], r: f64, max_count: usize) -> Vec<usize> {
        if !(r > 0.0) || self.points.is_empty() {
            return Vec::new();
        }
        let r2 = r * r;
        let lo = Self::key(center.map(|c| c - r), self.cell);
        let hi = Self::key(center.map(|c| c + r), self.cell);
        let mut found: Vec<(f64, usize)> = Vec::new();
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    if let Some(bucket) = self.buckets.get(&[i, j, k]) {
                        for &idx in bucket {
                            let d = dist2(self.points[idx], center);
                            if d <= r2 {
                                found.push((d, idx));
                            }
                        }
                    }
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(max_count);
        found.into_iter().map(|(_, i)| i).collect()
    }
}

/// Linear scan with the same contract as [`NeighborIndex::radius_query`].
pub fn brute_force_radius_query(points: &[[f64; 3]], center: [f64; 3], r: f64, max_count: usize) -> Vec<usize> {
    let r2 = r * r;
    let mut found: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(*p, center), i))
        .filter(|(d, _)| *d <= r2)
        .collect();
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    found.truncate(max_count);
    found.into_iter().map(|(_, i)| i).collect()
}
