use rand::Rng;

use super::NeighborIndex;
use crate::layers::{init_tensor, Init, Linear};
use crate::numerics::{Graph, NumericsError, ParamStore, ReduceOp, Tensor, Var};

/// Shared per-point MLP with ReLU after every layer.
///
/// The first layer is stored as two blocks, one for the neighbor feature and
/// one for the neighbor's offset from the group center. That is the same map
/// as a single layer over `[feature, offset]`, but the feature block can be
/// applied once per source point instead of once per (center, neighbor) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMlp {
    pub feature_in: Linear,
    pub offset_in: Option<Linear>,
    pub rest: Vec<Linear>,
}

impl PointMlp {
    /// `widths` lists the output width of every layer.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        feature_dim: usize,
        relative: bool,
        widths: &[usize],
    ) -> Result<Self, NumericsError> {
        let first = *widths.first().ok_or(NumericsError::EmptyInput { op: "PointMlp::new" })?;
        // Both blocks are initialized from the fan-in of the joint layer.
        let fan_in = feature_dim + if relative { 3 } else { 0 };
        let block = |store: &mut ParamStore, rng: &mut _, name: String, rows: usize, bias: bool| {
            let weight = store.insert(format!("{name}.weight"), init_tensor(rng, &[rows, first], fan_in, Init::FanIn))?;
            let bias = if bias {
                Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[first]))?)
            } else {
                None
            };
            Ok::<_, NumericsError>(Linear {
                weight,
                bias,
                in_dim: rows,
                out_dim: first,
            })
        };
        let feature_in = block(store, rng, format!("{name}.0.feat"), feature_dim, true)?;
        let offset_in = if relative {
            Some(block(store, rng, format!("{name}.0.offset"), 3, false)?)
        } else {
            None
        };
        let mut rest = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            rest.push(Linear::new(
                store,
                rng,
                &format!("{name}.{}", i + 1),
                pair[0],
                pair[1],
                true,
                Init::FanIn,
            )?);
        }
        Ok(Self {
            feature_in,
            offset_in,
            rest,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_in.in_dim
    }

    pub fn relative(&self) -> bool {
        self.offset_in.is_some()
    }

    pub fn out_dim(&self) -> usize {
        self.rest.last().map_or(self.feature_in.out_dim, |l| l.out_dim)
    }
}

/// Neighborhoods for a batch of group centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub centers: Vec<[f64; 3]>,
    /// Source-point indices per center; may be empty.
    pub groups: Vec<Vec<usize>>,
    /// Optional yaw per center. When present, offsets are expressed in the
    /// center's rotated frame (x along the yaw direction).
    pub yaw: Option<Vec<f64>>,
}

impl Grouping {
    pub fn by_radius(index: &NeighborIndex, centers: Vec<[f64; 3]>, radius: f64, max_count: usize) -> Self {
        let groups = centers
            .iter()
            .map(|c| index.radius_query(*c, radius, max_count))
            .collect();
        Self {
            centers,
            groups,
            yaw: None,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// PointNet-style grouping: every neighbor of a center goes through the
/// shared MLP (with its offset from the center appended when the MLP is
/// relative), then features are max-pooled per center. Centers without
/// neighbors produce zeros.
///
/// `features` is `[N × C]` with one row per entry of `positions`; the result
/// is `[centers × out_dim]`.
pub fn set_abstraction(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &PointMlp,
    features: Var,
    positions: &[[f64; 3]],
    grouping: &Grouping,
) -> Result<Var, NumericsError> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != positions.len() || shape[1] != mlp.feature_dim() {
        return Err(NumericsError::Shape {
            op: "set_abstraction",
            left: shape,
            right: vec![positions.len(), mlp.feature_dim()],
        });
    }
    let n = grouping.len();
    let out_dim = mlp.out_dim();
    let width = grouping.groups.iter().map(Vec::len).max().unwrap_or(0);
    if n == 0 || width == 0 {
        return Ok(g.constant(Tensor::zeros(&[n, out_dim])));
    }
    // Pad each group to `width` by repeating its first member; max-pooling is
    // idempotent so the padding never changes a pooled value.
    let mut idx = Vec::with_capacity(n * width);
    let mut offsets = Vec::new();
    for (c, group) in grouping.groups.iter().enumerate() {
        let center = grouping.centers[c];
        let (s, co) = grouping.yaw.as_ref().map_or((0.0, 1.0), |y| y[c].sin_cos());
        for slot in 0..width {
            let p = group.get(slot).or(group.first()).copied().unwrap_or(0);
            idx.push(p);
            if mlp.relative() {
                let d = [0, 1, 2].map(|a| positions.get(p).map_or(0.0, |q| q[a] - center[a]));
                offsets.extend_from_slice(&[co * d[0] + s * d[1], -s * d[0] + co * d[1], d[2]]);
            }
        }
    }
    if positions.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[n, out_dim])));
    }
    let projected = mlp.feature_in.forward(g, store, features)?;
    let mut h = g.gather_rows(projected, idx)?;
    if let Some(off_layer) = &mlp.offset_in {
        let off = g.constant(Tensor::new(vec![n * width, 3], offsets)?);
        let off = off_layer.forward(g, store, off)?;
        h = g.add(h, off)?;
    }
    h = g.relu(h);
    for layer in &mlp.rest {
        h = layer.forward(g, store, h)?;
        h = g.relu(h);
    }
    let h = g.reshape(h, &[n, width, out_dim])?;
    let pooled = g.reduce(h, ReduceOp::Max, 1)?;
    if grouping.groups.iter().all(|gr| !gr.is_empty()) {
        return Ok(pooled);
    }
    let mask: Vec<f64> = grouping
        .groups
        .iter()
        .flat_map(|gr| std::iter::repeat(if gr.is_empty() { 0.0 } else { 1.0 }).take(out_dim))
        .collect();
    let mask = g.constant(Tensor::new(vec![n, out_dim], mask)?);
    g.mul(pooled, mask)
}
