//! Plain loops behind the graph ops.
//!
//! `matmul_acc` uses an i-k-j loop so every output row depends only on the
//! matching input row; batched and unbatched evaluations of the same row are
//! therefore bitwise identical.

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

const FIXED_POINT_BITS: i32 = 100;

/// Sums `terms` with a result that does not depend on their order.
///
/// Every term is rounded onto a common fixed-point grid derived from `bound`
/// (an upper bound on `|term|`), accumulated exactly in `i128`, and converted
/// back once. Terms below `bound · 2^-100` are dropped.
pub fn order_free_sum(terms: impl Iterator<Item = f64>, bound: f64) -> f64 {
    if !(bound > 0.0) || !bound.is_finite() {
        return terms.sum();
    }
    let exp = bound.log2().ceil() as i32;
    let up = (2.0f64).powi(FIXED_POINT_BITS - exp);
    let down = (2.0f64).powi(exp - FIXED_POINT_BITS);
    let mut acc: i128 = 0;
    for t in terms {
        acc += (t * up) as i128;
    }
    acc as f64 * down
}

/// Batched `a[b×m×k] · v[b×k×n]` where the reduction over `k` is order-free.
pub fn bmm_order_free(
    a: &[f64],
    v: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    let mut col_max = vec![0.0f64; n];
    for bi in 0..batch {
        let a_b = &a[bi * m * k..(bi + 1) * m * k];
        let v_b = &v[bi * k * n..(bi + 1) * k * n];
        col_max.iter_mut().for_each(|c| *c = 0.0);
        for kk in 0..k {
            for j in 0..n {
                col_max[j] = col_max[j].max(v_b[kk * n + j].abs());
            }
        }
        for i in 0..m {
            let a_row = &a_b[i * k..(i + 1) * k];
            let row_max = a_row.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
            for j in 0..n {
                let bound = row_max * col_max[j] * k as f64;
                out[bi * m * n + i * n + j] =
                    order_free_sum((0..k).map(|kk| a_row[kk] * v_b[kk * n + j]), bound);
            }
        }
    }
    out
}
