use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use crate::layers::{init_tensor, Init, Norm};
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::pointcloud::VoxelGrid;

/// Kernel offsets in weight-row order: `(dx, dy, dz)` lexicographic over
/// `{-1, 0, 1}³`.
pub const KERNEL_OFFSETS: usize = 27;

fn offset(o: usize) -> [i64; 3] {
    [(o / 9) as i64 - 1, ((o / 3) % 3) as i64 - 1, (o % 3) as i64 - 1]
}

/// Occupied cells of one scale plus a feature row per cell.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    pub keys: Vec<[usize; 3]>,
    pub extents: [usize; 3],
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub features: Var,
}

impl SparseTensor {
    /// Constant input tensor holding the grid's cell features in key order.
    pub fn from_grid(g: &mut Graph, grid: &VoxelGrid) -> Self {
        let c = grid.feature_dim().max(4);
        let data: Vec<f64> = grid.cells.values().flat_map(|cell| cell.feature.iter().copied()).collect();
        let features = g.constant(Tensor::new(vec![grid.len(), c], data).expect("uniform feature width"));
        Self {
            keys: grid.cells.keys().copied().collect(),
            extents: grid.extents,
            origin: grid.origin,
            voxel_size: grid.voxel_size,
            features,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn cell_center(&self, key: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + (key[a] as f64 + 0.5) * self.voxel_size[a])
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.keys.iter().map(|k| self.cell_center(*k)).collect()
    }
}

/// Precomputed index structure of one regular sparse convolution: which
/// output cells exist and, for each, which input row feeds each kernel tap.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvRulebook {
    pub stride: usize,
    pub in_len: usize,
    pub out_keys: Vec<[usize; 3]>,
    pub out_extents: [usize; 3],
    /// `out_keys.len() × 27` input rows; `in_len` marks an empty tap.
    pub gather: Vec<usize>,
}

impl ConvRulebook {
    /// Output cells are every in-bounds cell that sees at least one
    /// occupied input under the kernel (padding 1).
    pub fn new(in_keys: &[[usize; 3]], extents: [usize; 3], stride: usize) -> Self {
        let stride = stride.max(1);
        let out_extents = extents.map(|e| e.div_ceil(stride));
        let lookup: HashMap<[usize; 3], usize> = in_keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let mut out: BTreeSet<[usize; 3]> = BTreeSet::new();
        for key in in_keys {
            'taps: for o in 0..KERNEL_OFFSETS {
                let d = offset(o);
                let mut q = [0usize; 3];
                for a in 0..3 {
                    // input p = stride·q + d  ⇒  q = (p − d) / stride
                    let num = key[a] as i64 - d[a];
                    if num < 0 || num % stride as i64 != 0 {
                        continue 'taps;
                    }
                    let v = (num / stride as i64) as usize;
                    if v >= out_extents[a] {
                        continue 'taps;
                    }
                    q[a] = v;
                }
                out.insert(q);
            }
        }
        let out_keys: Vec<[usize; 3]> = out.into_iter().collect();
        let mut gather = Vec::with_capacity(out_keys.len() * KERNEL_OFFSETS);
        for q in &out_keys {
            for o in 0..KERNEL_OFFSETS {
                let d = offset(o);
                let p = [0, 1, 2].map(|a| (stride * q[a]) as i64 + d[a]);
                let row = if p.iter().zip(&extents).all(|(&v, &e)| v >= 0 && (v as usize) < e) {
                    lookup.get(&p.map(|v| v as usize)).copied()
                } else {
                    None
                };
                gather.push(row.unwrap_or(in_keys.len()));
            }
        }
        Self {
            stride,
            in_len: in_keys.len(),
            out_keys,
            out_extents,
            gather,
        }
    }
}

/// 3×3×3 convolution, bias, layer-norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvLayer {
    /// `[27·c_in × c_out]`, rows ordered by kernel tap then input channel.
    pub kernel: ParamId,
    pub bias: ParamId,
    pub norm: Norm,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl SparseConvLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self, NumericsError> {
        let fan_in = KERNEL_OFFSETS * c_in;
        Ok(Self {
            kernel: store.insert(
                format!("{name}.kernel"),
                init_tensor(rng, &[fan_in, c_out], fan_in, Init::FanIn),
            )?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
            norm: Norm::new(store, &format!("{name}.norm"), c_out)?,
            c_in,
            c_out,
            stride,
        })
    }
}

/// Applies one block using a rulebook built for `input`'s cells.
pub fn sparse_conv_block(
    g: &mut Graph,
    store: &ParamStore,
    input: &SparseTensor,
    layer: &SparseConvLayer,
    rulebook: &ConvRulebook,
) -> Result<SparseTensor, NumericsError> {
    let shape = g.shape(input.features).to_vec();
    if shape.len() != 2 || shape[1] != layer.c_in || shape[0] != rulebook.in_len {
        return Err(NumericsError::Shape {
            op: "sparse_conv_block",
            left: shape,
            right: vec![rulebook.in_len, layer.c_in],
        });
    }
    let n_out = rulebook.out_keys.len();
    let out_size = [0, 1, 2].map(|a| input.voxel_size[a] * layer.stride as f64);
    let features = if n_out == 0 {
        g.constant(Tensor::zeros(&[0, layer.c_out]))
    } else {
        let zero = g.constant(Tensor::zeros(&[1, layer.c_in]));
        let padded = g.concat_rows(&[input.features, zero])?;
        let cols = g.gather_rows(padded, rulebook.gather.clone())?;
        let cols = g.reshape(cols, &[n_out, KERNEL_OFFSETS * layer.c_in])?;
        let w = g.param(store, layer.kernel);
        let b = g.param(store, layer.bias);
        let y = g.matmul(cols, w)?;
        let y = g.add_bias(y, b)?;
        let y = layer.norm.forward(g, store, y)?;
        g.relu(y)
    };
    Ok(SparseTensor {
        keys: rulebook.out_keys.clone(),
        extents: rulebook.out_extents,
        origin: input.origin,
        voxel_size: out_size,
        features,
    })
}

/// The four blocks of the voxel encoder (strides 1, 2, 2, 2).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCnn {
    pub blocks: Vec<SparseConvLayer>,
}

impl VoxelCnn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        channels: [usize; 4],
    ) -> Result<Self, NumericsError> {
        let mut blocks = Vec::new();
        let mut prev = c_in;
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(SparseConvLayer::new(store, rng, &format!("{name}.block{i}"), prev, c, stride)?);
            prev = c;
        }
        Ok(Self { blocks })
    }

    /// Rulebooks of all blocks for a given input occupancy.
    pub fn plan(&self, keys: &[[usize; 3]], extents: [usize; 3]) -> Vec<ConvRulebook> {
        let mut books = Vec::with_capacity(self.blocks.len());
        let mut keys = keys.to_vec();
        let mut extents = extents;
        for block in &self.blocks {
            let book = ConvRulebook::new(&keys, extents, block.stride);
            keys = book.out_keys.clone();
            extents = book.out_extents;
            books.push(book);
        }
        books
    }
}

/// Runs every block and keeps each block's output as one scale.
pub fn run_voxel_cnn(
    g: &mut Graph,
    store: &ParamStore,
    input: &SparseTensor,
    cnn: &VoxelCnn,
    rulebooks: &[ConvRulebook],
) -> Result<Vec<SparseTensor>, NumericsError> {
    if rulebooks.len() != cnn.blocks.len() {
        return Err(NumericsError::Shape {
            op: "run_voxel_cnn",
            left: vec![rulebooks.len()],
            right: vec![cnn.blocks.len()],
        });
    }
    let mut scales = Vec::with_capacity(cnn.blocks.len());
    let mut current = input.clone();
    for (block, book) in cnn.blocks.iter().zip(rulebooks) {
        current = sparse_conv_block(g, store, &current, block, book)?;
        scales.push(current.clone());
    }
    Ok(scales)
}
