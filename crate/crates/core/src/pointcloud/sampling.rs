use super::{dist2, PointCloudError};

/// Greedy max-min sampling. The first pick is `seed_index`; each further
/// pick maximizes the distance to the picked set (ties: lowest index).
/// When `n` reaches the number of points every index is returned.
pub fn furthest_point_sampling(
    points: &[[f64; 3]],
    n: usize,
    seed_index: usize,
) -> Result<Vec<usize>, PointCloudError> {
    if points.is_empty() {
        return Err(PointCloudError::EmptyInput("furthest_point_sampling"));
    }
    let n = n.min(points.len());
    let seed = seed_index.min(points.len() - 1);
    let mut picked = Vec::with_capacity(n);
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut current = seed;
    for _ in 0..n {
        picked.push(current);
        taken[current] = true;
        let c = points[current];
        let mut best: Option<usize> = None;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(*p, c);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if best.map_or(true, |b| min_d2[i] > min_d2[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => current = b,
            None => break,
        }
    }
    Ok(picked)
}
