use rand::Rng;

use crate::layers::{init_tensor, Init, Linear, Norm};
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Var};

/// Divisor applied to attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitScale {
    /// `√d_in`, the width of the tokens entering the layer.
    #[default]
    InputWidth,
    /// `√d_k`, the per-head query/key width.
    KeyWidth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_layers: usize,
    pub scale: LogitScale,
}

impl AttentionConfig {
    /// Per-head widths `d_model / n_heads`.
    pub fn new(d_model: usize, n_heads: usize, n_layers: usize) -> Self {
        let d = (d_model / n_heads.max(1)).max(1);
        Self {
            d_model,
            n_heads,
            d_k: d,
            d_v: d,
            n_layers,
            scale: LogitScale::InputWidth,
        }
    }

    fn divisor(&self) -> f64 {
        match self.scale {
            LogitScale::InputWidth => (self.d_model as f64).sqrt(),
            LogitScale::KeyWidth => (self.d_k as f64).sqrt(),
        }
    }
}

/// `[B·S × d]` rows → `[B × S × d]`.
fn as_batches(g: &mut Graph, x: Var, batch: usize) -> Result<Var, NumericsError> {
    let s = g.shape(x).to_vec();
    g.reshape(x, &[batch, s[0] / batch.max(1), s[1]])
}

/// Scaled dot-product attention over `batch` independent sequences stored
/// as consecutive rows. Queries and keys come from `xl`, values from `xs`:
/// `softmax((xl·wq)(xl·wk)ᵀ / divisor) · (xs·wv)`.
///
/// Returns the output and the `[B × S × S]` attention weights.
pub fn attention(
    g: &mut Graph,
    xl: Var,
    xs: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    batch: usize,
    divisor: f64,
) -> Result<(Var, Var), NumericsError> {
    let q = g.matmul(xl, wq)?;
    let k = g.matmul(xl, wk)?;
    let v = g.matmul(xs, wv)?;
    let (q, k, v) = (as_batches(g, q, batch)?, as_batches(g, k, batch)?, as_batches(g, v, batch)?);
    let logits = g.batch_matmul_nt(q, k)?;
    let logits = g.scale(logits, 1.0 / divisor);
    let weights = g.softmax_rows(logits);
    let out = g.batch_matmul_order_free(weights, v)?;
    let s = g.shape(out).to_vec();
    let out = g.reshape(out, &[s[0] * s[1], s[2]])?;
    Ok((out, weights))
}

/// N attention heads, concatenated and projected by `W_O`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHead {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub out: Linear,
    pub config: AttentionConfig,
}

impl MultiHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        config: AttentionConfig,
        out_init: Init,
    ) -> Result<Self, NumericsError> {
        let d = config.d_model;
        let (mut wq, mut wk, mut wv) = (Vec::new(), Vec::new(), Vec::new());
        for h in 0..config.n_heads {
            wq.push(store.insert(format!("{name}.head{h}.wq"), init_tensor(rng, &[d, config.d_k], d, Init::FanIn))?);
            wk.push(store.insert(format!("{name}.head{h}.wk"), init_tensor(rng, &[d, config.d_k], d, Init::FanIn))?);
            wv.push(store.insert(format!("{name}.head{h}.wv"), init_tensor(rng, &[d, config.d_v], d, Init::FanIn))?);
        }
        let out = Linear::new(store, rng, &format!("{name}.out"), config.n_heads * config.d_v, d, true, out_init)?;
        Ok(Self { wq, wk, wv, out, config })
    }

    /// Self-attention over `batch` sequences stacked in `x` (`[B·S × d]`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize) -> Result<Var, NumericsError> {
        Ok(self.forward_with_weights(g, store, x, batch)?.0)
    }

    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
    ) -> Result<(Var, Vec<Var>), NumericsError> {
        let width = g.shape(x).get(1).copied().unwrap_or(0);
        if width != self.config.d_model || g.shape(x).len() != 2 {
            return Err(NumericsError::Shape {
                op: "multi_head",
                left: g.shape(x).to_vec(),
                right: vec![self.config.d_model],
            });
        }
        let mut heads = Vec::with_capacity(self.wq.len());
        let mut weights = Vec::with_capacity(self.wq.len());
        for h in 0..self.wq.len() {
            let (wq, wk, wv) = (
                g.param(store, self.wq[h]),
                g.param(store, self.wk[h]),
                g.param(store, self.wv[h]),
            );
            let (o, w) = attention(g, x, x, wq, wk, wv, batch, self.config.divisor())?;
            heads.push(o);
            weights.push(w);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        Ok((self.out.forward(g, store, cat)?, weights))
    }
}

/// Post-norm encoder layer: `x ← LN(x + MHSA(x)); x ← LN(x + FFN(x))`.
/// Both residual-branch output projections start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: MultiHead,
    pub norm1: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: Norm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        config: AttentionConfig,
    ) -> Result<Self, NumericsError> {
        let d = config.d_model;
        Ok(Self {
            attn: MultiHead::new(store, rng, &format!("{name}.attn"), config, Init::Zeros)?,
            norm1: Norm::new(store, &format!("{name}.norm1"), d)?,
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn_in"), d, 2 * d, true, Init::FanIn)?,
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn_out"), 2 * d, d, true, Init::Zeros)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize) -> Result<Var, NumericsError> {
        let a = self.attn.forward(g, store, x, batch)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, store, x)?;
        let h = self.ffn_in.forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.ffn_out.forward(g, store, h)?;
        let x2 = g.add(x, h)?;
        self.norm2.forward(g, store, x2)
    }

    /// Output projections of the two residual branches.
    pub fn residual_projections(&self) -> Vec<ParamId> {
        self.attn.out.params().into_iter().chain(self.ffn_out.params()).collect()
    }
}

/// `n_layers` encoder layers applied in sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
}

impl EncoderStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        config: AttentionConfig,
    ) -> Result<Self, NumericsError> {
        let layers = (0..config.n_layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("{name}.layer{i}"), config))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize) -> Result<Var, NumericsError> {
        self.layers.iter().try_fold(x, |x, l| l.forward(g, store, x, batch))
    }

    pub fn residual_projections(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(EncoderLayer::residual_projections).collect()
    }
}
