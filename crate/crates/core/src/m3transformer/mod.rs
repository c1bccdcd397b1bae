//! Transformer fusion of the keypoint representations: first across the
//! six representations of each keypoint, then across keypoints.

mod attention;


use rand::Rng;

pub use attention::{attention, AttentionConfig, EncoderLayer, EncoderStack, LogitScale, MultiHead};

use crate::layers::{Init, Linear};
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Var};

/// Number of per-keypoint representations (four voxel scales, raw points, BEV).
pub const NUM_REPRESENTATIONS: usize = 6;

fn leading_dim_error(op: &'static str, g: &Graph, a: Var, b: Var) -> NumericsError {
    NumericsError::Shape {
        op,
        left: g.shape(a).to_vec(),
        right: g.shape(b).to_vec(),
    }
}

/// Six bias-free linear maps bringing every representation to width `ĉ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureReduce {
    pub maps: Vec<Linear>,
}

impl FeatureReduce {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        widths: &[usize],
        d_model: usize,
    ) -> Result<Self, NumericsError> {
        let maps = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(store, rng, &format!("{name}.{i}"), c, d_model, false, Init::FanIn))
            .collect::<Result<_, _>>()?;
        Ok(Self { maps })
    }
}

pub fn feature_reduce(
    g: &mut Graph,
    store: &ParamStore,
    reduce: &FeatureReduce,
    reps: &[Var],
) -> Result<Vec<Var>, NumericsError> {
    if reps.len() != reduce.maps.len() {
        return Err(NumericsError::Shape {
            op: "feature_reduce",
            left: vec![reps.len()],
            right: vec![reduce.maps.len()],
        });
    }
    reps.iter().zip(&reduce.maps).map(|(&r, m)| m.forward(g, store, r)).collect()
}

/// Concatenates the representations column-wise in their fixed order,
/// giving one `c_T`-wide token per keypoint.
pub fn concat_split(g: &mut Graph, reps: &[Var]) -> Result<Var, NumericsError> {
    let first = *reps.first().ok_or(NumericsError::EmptyInput { op: "concat_split" })?;
    for &r in reps {
        if g.shape(r)[0] != g.shape(first)[0] {
            return Err(leading_dim_error("concat_split", g, first, r));
        }
    }
    g.concat_cols(reps)
}

/// Inverse of [`concat_split`].
pub fn split_columns(g: &mut Graph, tokens: Var, widths: &[usize]) -> Result<Vec<Var>, NumericsError> {
    let mut start = 0;
    let mut out = Vec::with_capacity(widths.len());
    for &w in widths {
        out.push(g.slice_cols(tokens, start, start + w)?);
        start += w;
    }
    Ok(out)
}

/// Attention over the six reduced representations of every keypoint, with
/// each output projected back to its representation's original width.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRepScaleLayer {
    pub stack: EncoderStack,
    pub back: Vec<Linear>,
    pub d_model: usize,
}

impl MultiRepScaleLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        config: AttentionConfig,
        widths: &[usize],
    ) -> Result<Self, NumericsError> {
        let stack = EncoderStack::new(store, rng, &format!("{name}.encoder"), config)?;
        let back = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(store, rng, &format!("{name}.back{i}"), config.d_model, c, true, Init::FanIn))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            stack,
            back,
            d_model: config.d_model,
        })
    }
}

/// `reduced` holds six `[n × ĉ]` matrices; keypoints are processed as `n`
/// independent length-6 sequences.
pub fn multi_rep_scale_layer(
    g: &mut Graph,
    store: &ParamStore,
    layer: &MultiRepScaleLayer,
    reduced: &[Var],
) -> Result<Vec<Var>, NumericsError> {
    let k = reduced.len();
    if k != layer.back.len() {
        return Err(NumericsError::Shape {
            op: "multi_rep_scale_layer",
            left: vec![k],
            right: vec![layer.back.len()],
        });
    }
    let n = g.shape(reduced[0])[0];
    let d = layer.d_model;
    // [n × k·ĉ] → [n·k × ĉ]: keypoint-major token rows.
    let wide = concat_split(g, reduced)?;
    let tokens = g.reshape(wide, &[n * k, d])?;
    let encoded = layer.stack.forward(g, store, tokens, n)?;
    let wide = g.reshape(encoded, &[n, k * d])?;
    let parts = split_columns(g, wide, &vec![d; k])?;
    parts
        .into_iter()
        .zip(&layer.back)
        .map(|(p, back)| back.forward(g, store, p))
        .collect()
}

/// Attention across keypoints on `c_T`-wide tokens, with linear maps to and
/// from the attention width.
#[derive(Debug, Clone, PartialEq)]
pub struct MutualRelationLayer {
    pub entry: Linear,
    pub stack: EncoderStack,
    pub exit: Linear,
}

impl MutualRelationLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        config: AttentionConfig,
        c_t: usize,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            entry: Linear::new(store, rng, &format!("{name}.entry"), c_t, config.d_model, true, Init::FanIn)?,
            stack: EncoderStack::new(store, rng, &format!("{name}.encoder"), config)?,
            exit: Linear::new(store, rng, &format!("{name}.exit"), config.d_model, c_t, true, Init::FanIn)?,
        })
    }
}

pub fn mutual_relation_layer(
    g: &mut Graph,
    store: &ParamStore,
    layer: &MutualRelationLayer,
    tokens: Var,
) -> Result<Var, NumericsError> {
    let x = layer.entry.forward(g, store, tokens)?;
    let x = layer.stack.forward(g, store, x, 1)?;
    layer.exit.forward(g, store, x)
}

/// The complete fusion block: reduce → multi-representation attention →
/// concatenate → keypoint attention.
#[derive(Debug, Clone, PartialEq)]
pub struct M3Block {
    pub widths: Vec<usize>,
    pub reduce: FeatureReduce,
    pub multi_rep: MultiRepScaleLayer,
    pub mutual: MutualRelationLayer,
}

/// Intermediate and final outputs of [`M3Block::forward`].
#[derive(Debug, Clone)]
pub struct M3Output {
    pub reduced: Vec<Var>,
    pub per_representation: Vec<Var>,
    pub concatenated: Var,
    pub fused: Var,
}

impl M3Block {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        widths: &[usize],
        config: AttentionConfig,
    ) -> Result<Self, NumericsError> {
        let c_t = widths.iter().sum();
        Ok(Self {
            widths: widths.to_vec(),
            reduce: FeatureReduce::new(store, rng, &format!("{name}.reduce"), widths, config.d_model)?,
            multi_rep: MultiRepScaleLayer::new(store, rng, &format!("{name}.multi_rep"), config, widths)?,
            mutual: MutualRelationLayer::new(store, rng, &format!("{name}.mutual"), config, c_t)?,
        })
    }

    pub fn c_t(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, reps: &[Var]) -> Result<M3Output, NumericsError> {
        let reduced = feature_reduce(g, store, &self.reduce, reps)?;
        let per_representation = multi_rep_scale_layer(g, store, &self.multi_rep, &reduced)?;
        let concatenated = concat_split(g, &per_representation)?;
        let fused = mutual_relation_layer(g, store, &self.mutual, concatenated)?;
        Ok(M3Output {
            reduced,
            per_representation,
            concatenated,
            fused,
        })
    }

    /// Output projections of every residual branch in both transformers.
    pub fn residual_projections(&self) -> Vec<ParamId> {
        let mut ids = self.multi_rep.stack.residual_projections();
        ids.extend(self.mutual.stack.residual_projections());
        ids
    }
}
