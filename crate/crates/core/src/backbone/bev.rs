use rand::Rng;

use super::SparseTensor;
use crate::layers::{init_tensor, Init, Norm};
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};

/// Dense bird's-eye-view map stored as `[rows·cols × channels]`, pixel
/// `(i, j)` at row `i·cols + j` (`i` along x, `j` along y).
#[derive(Debug, Clone, Copy)]
pub struct BevMap {
    pub features: Var,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

/// Gather indices stacking the z column of every pixel: row `p·H + k` holds
/// cell `(i, j, k)` or `n` (the appended zero row) when empty.
pub fn bev_flatten_index(keys: &[[usize; 3]], extents: [usize; 3]) -> Vec<usize> {
    let [l, w, h] = extents;
    let mut idx = vec![keys.len(); l * w * h];
    for (row, k) in keys.iter().enumerate() {
        idx[(k[0] * w + k[1]) * h + k[2]] = row;
    }
    idx
}

/// Folds the z axis into channels: channel `k·C + c` of pixel `(i, j)` is
/// channel `c` of voxel `(i, j, k)`; empty voxels contribute zeros.
pub fn bev_flatten(g: &mut Graph, grid: &SparseTensor) -> Result<BevMap, NumericsError> {
    let idx = bev_flatten_index(&grid.keys, grid.extents);
    bev_flatten_with(g, grid.features, idx, grid.extents)
}

pub fn bev_flatten_with(
    g: &mut Graph,
    features: Var,
    idx: Vec<usize>,
    extents: [usize; 3],
) -> Result<BevMap, NumericsError> {
    let c = g.shape(features)[1];
    let [l, w, h] = extents;
    let zero = g.constant(Tensor::zeros(&[1, c]));
    let padded = g.concat_rows(&[features, zero])?;
    let stacked = g.gather_rows(padded, idx)?;
    let features = g.reshape(stacked, &[l * w, h * c])?;
    Ok(BevMap {
        features,
        rows: l,
        cols: w,
        channels: h * c,
    })
}

fn tap(t: usize) -> (i64, i64) {
    ((t / 3) as i64 - 1, (t % 3) as i64 - 1)
}

/// im2col indices of a 3×3, padding-1 convolution with the given stride.
/// Returns the output size and `out_pixels × 9` source pixels (`rows·cols`
/// marks padding).
pub fn conv2d_index(rows: usize, cols: usize, stride: usize) -> ((usize, usize), Vec<usize>) {
    let (orows, ocols) = (rows.div_ceil(stride), cols.div_ceil(stride));
    let empty = rows * cols;
    let mut idx = Vec::with_capacity(orows * ocols * 9);
    for oi in 0..orows {
        for oj in 0..ocols {
            for t in 0..9 {
                let (di, dj) = tap(t);
                let i = (oi * stride) as i64 + di;
                let j = (oj * stride) as i64 + dj;
                let inside = i >= 0 && j >= 0 && (i as usize) < rows && (j as usize) < cols;
                idx.push(if inside { i as usize * cols + j as usize } else { empty });
            }
        }
    }
    ((orows, ocols), idx)
}

/// im2col indices of the transposed (adjoint) stride-2 convolution mapping a
/// `rows × cols` map to exactly `out_rows × out_cols`: output `q` collects
/// input `o` through tap `d` whenever `2·o + d = q`.
pub fn deconv2d_index(rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<usize> {
    let empty = rows * cols;
    let mut idx = Vec::with_capacity(out_rows * out_cols * 9);
    for qi in 0..out_rows {
        for qj in 0..out_cols {
            for t in 0..9 {
                let (di, dj) = tap(t);
                let ni = qi as i64 - di;
                let nj = qj as i64 - dj;
                let ok = ni >= 0 && nj >= 0 && ni % 2 == 0 && nj % 2 == 0;
                let (oi, oj) = ((ni / 2) as usize, (nj / 2) as usize);
                idx.push(if ok && oi < rows && oj < cols { oi * cols + oj } else { empty });
            }
        }
    }
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    /// `[9·c_in × c_out]`, rows ordered by tap then input channel.
    pub kernel: ParamId,
    pub bias: ParamId,
    pub norm: Norm,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2dLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            kernel: store.insert(format!("{name}.kernel"), init_tensor(rng, &[9 * c_in, c_out], 9 * c_in, Init::FanIn))?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
            norm: Norm::new(store, &format!("{name}.norm"), c_out)?,
            c_in,
            c_out,
        })
    }

    /// Gathers taps with `idx`, then conv + bias + layer-norm + ReLU.
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, idx: Vec<usize>) -> Result<Var, NumericsError> {
        let n_out = idx.len() / 9;
        let zero = g.constant(Tensor::zeros(&[1, self.c_in]));
        let padded = g.concat_rows(&[x, zero])?;
        let cols = g.gather_rows(padded, idx)?;
        let cols = g.reshape(cols, &[n_out, 9 * self.c_in])?;
        let w = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let y = g.matmul(cols, w)?;
        let y = g.add_bias(y, b)?;
        let y = self.norm.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

/// Encoder-decoder over the BEV map: each block halves the resolution with
/// a stride-2 convolution and restores it with a transposed convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BevNet {
    pub blocks: Vec<(Conv2dLayer, Conv2dLayer)>,
    pub c_out: usize,
}

/// Index plan for [`BevNet`] at one input size.
#[derive(Debug, Clone, PartialEq)]
pub struct BevPlan {
    pub rows: usize,
    pub cols: usize,
    pub down: Vec<usize>,
    pub up: Vec<usize>,
}

impl BevPlan {
    pub fn new(rows: usize, cols: usize) -> Self {
        let ((dr, dc), down) = conv2d_index(rows, cols, 2);
        let up = deconv2d_index(dr, dc, rows, cols);
        Self { rows, cols, down, up }
    }
}

impl BevNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        n_blocks: usize,
    ) -> Result<Self, NumericsError> {
        let mut blocks = Vec::new();
        let mut prev = c_in;
        for i in 0..n_blocks {
            let down = Conv2dLayer::new(store, rng, &format!("{name}.block{i}.down"), prev, c_out)?;
            let up = Conv2dLayer::new(store, rng, &format!("{name}.block{i}.up"), c_out, c_out)?;
            blocks.push((down, up));
            prev = c_out;
        }
        Ok(Self { blocks, c_out })
    }
}

pub fn bev_conv_net(
    g: &mut Graph,
    store: &ParamStore,
    input: &BevMap,
    net: &BevNet,
    plan: &BevPlan,
) -> Result<BevMap, NumericsError> {
    if input.rows < 4 || input.cols < 4 || plan.rows != input.rows || plan.cols != input.cols {
        return Err(NumericsError::Shape {
            op: "bev_conv_net",
            left: vec![input.rows, input.cols],
            right: vec![plan.rows, plan.cols],
        });
    }
    let mut x = input.features;
    for (down, up) in &net.blocks {
        x = down.apply(g, store, x, plan.down.clone())?;
        x = up.apply(g, store, x, plan.up.clone())?;
    }
    Ok(BevMap {
        features: x,
        rows: input.rows,
        cols: input.cols,
        channels: net.c_out,
    })
}

/// Four source pixels and blend weights of bilinear sampling at each
/// position. Pixel `(i, j)` has its centre at
/// `origin + (i + ½, j + ½)·pixel_size`; positions beyond the outermost
/// centres clamp to the border.
pub fn bilinear_taps(
    positions: &[[f64; 3]],
    rows: usize,
    cols: usize,
    origin: [f64; 2],
    pixel_size: [f64; 2],
) -> ([Vec<usize>; 4], [Vec<f64>; 4]) {
    let mut idx: [Vec<usize>; 4] = Default::default();
    let mut wts: [Vec<f64>; 4] = Default::default();
    for p in positions {
        let u = ((p[0] - origin[0]) / pixel_size[0] - 0.5).clamp(0.0, (rows - 1) as f64);
        let v = ((p[1] - origin[1]) / pixel_size[1] - 0.5).clamp(0.0, (cols - 1) as f64);
        let (i0, j0) = (u.floor() as usize, v.floor() as usize);
        let (i1, j1) = ((i0 + 1).min(rows - 1), (j0 + 1).min(cols - 1));
        let (tu, tv) = (u - i0 as f64, v - j0 as f64);
        let taps = [
            (i0, j0, (1.0 - tu) * (1.0 - tv)),
            (i1, j0, tu * (1.0 - tv)),
            (i0, j1, (1.0 - tu) * tv),
            (i1, j1, tu * tv),
        ];
        for (t, (i, j, w)) in taps.into_iter().enumerate() {
            idx[t].push(i * cols + j);
            wts[t].push(w);
        }
    }
    (idx, wts)
}

/// Bilinearly interpolated BEV features at each position, `[n × C]`.
pub fn bev_bilinear_sample(
    g: &mut Graph,
    bev: &BevMap,
    positions: &[[f64; 3]],
    origin: [f64; 2],
    pixel_size: [f64; 2],
) -> Result<Var, NumericsError> {
    let taps = bilinear_taps(positions, bev.rows, bev.cols, origin, pixel_size);
    bev_bilinear_sample_with(g, bev, &taps)
}

pub fn bev_bilinear_sample_with(
    g: &mut Graph,
    bev: &BevMap,
    taps: &([Vec<usize>; 4], [Vec<f64>; 4]),
) -> Result<Var, NumericsError> {
    let n = taps.0[0].len();
    let c = bev.channels;
    if n == 0 {
        return Ok(g.constant(Tensor::zeros(&[0, c])));
    }
    let mut acc: Option<Var> = None;
    for t in 0..4 {
        let rows = g.gather_rows(bev.features, taps.0[t].clone())?;
        let w: Vec<f64> = taps.1[t].iter().flat_map(|&w| std::iter::repeat(w).take(c)).collect();
        let w = g.constant(Tensor::new(vec![n, c], w)?);
        let part = g.mul(rows, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, part)?,
            None => part,
        });
    }
    Ok(acc.expect("four taps"))
}
