use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Additive score for disallowed query/key pairs.
pub const MASKED: f64 = -1e30;

/// `rows(query) x rows(key)` additive mask: 0 where the groups agree, [`MASKED`] elsewhere.
pub fn group_mask<T: Scalar>(query_groups: &[usize], key_groups: &[usize]) -> Result<Tensor<T>> {
    if query_groups.is_empty() || key_groups.is_empty() {
        return Err(Error::contract("attention mask needs at least one query and one key"));
    }
    let mut data = Vec::with_capacity(query_groups.len() * key_groups.len());
    for q in query_groups {
        let mut any = false;
        for k in key_groups {
            any |= q == k;
            data.push(if q == k { T::zero() } else { T::lit(MASKED) });
        }
        if !any {
            return Err(Error::contract(format!("query group {q} has no visible keys")));
        }
    }
    Tensor::matrix(query_groups.len(), key_groups.len(), data)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        Self {
            gain: store.add_filled(format!("{prefix}.gain"), 1, dim, T::one()),
            bias: store.add_filled(format!("{prefix}.bias"), 1, dim, T::zero()),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let scaled = g.mul(n, gain)?;
        g.add(scaled, bias)
    }
}

/// Parameters of one post-norm transformer layer (bias-free attention
/// projections, GELU feed-forward).
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln1: LayerNormParams,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2: LayerNormParams,
}

impl AttentionParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        ffn_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            wq: store.add_glorot(format!("{prefix}.wq"), dim, dim, rng),
            wk: store.add_glorot(format!("{prefix}.wk"), dim, dim, rng),
            wv: store.add_glorot(format!("{prefix}.wv"), dim, dim, rng),
            wo: store.add_glorot(format!("{prefix}.wo"), dim, dim, rng),
            ln1: LayerNormParams::register(store, &format!("{prefix}.ln1"), dim),
            w1: store.add_glorot(format!("{prefix}.ff1"), dim, ffn_dim, rng),
            b1: store.add_filled(format!("{prefix}.ff1_bias"), 1, ffn_dim, T::zero()),
            w2: store.add_glorot(format!("{prefix}.ff2"), ffn_dim, dim, rng),
            b2: store.add_filled(format!("{prefix}.ff2_bias"), 1, dim, T::zero()),
            ln2: LayerNormParams::register(store, &format!("{prefix}.ln2"), dim),
        }
    }

    pub fn register_stack<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        depth: usize,
        dim: usize,
        ffn_dim: usize,
        rng: &mut impl Rng,
    ) -> Vec<Self> {
        (0..depth)
            .map(|l| Self::register(store, &format!("{prefix}.{l}"), dim, ffn_dim, rng))
            .collect()
    }
}

/// Scaled dot-product attention of `query` rows over `memory` rows, split
/// across `heads`, followed by the output projection.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    heads: usize,
    query: Var,
    memory: Var,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let dim = g.shape(query)[1];
    if g.shape(memory)[1] != dim {
        return Err(Error::shape("multi_head_attention", g.shape(query), g.shape(memory)));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::contract(format!("dim {dim} is not divisible by {heads} heads")));
    }
    if let Some(m) = mask {
        let expected = [g.shape(query)[0], g.shape(memory)[0]];
        if m.shape() != expected {
            return Err(Error::shape("attention_mask", m.shape(), &expected));
        }
    }
    let head_dim = dim / heads;
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();

    let (wq, wk, wv, wo) = (
        g.param(store, p.wq),
        g.param(store, p.wk),
        g.param(store, p.wv),
        g.param(store, p.wo),
    );
    let q = g.matmul(query, wq)?;
    let k = g.matmul(memory, wk)?;
    let v = g.matmul(memory, wv)?;
    let mask = mask.map(|m| g.constant(m.clone()));

    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let mut scores = g.scalar_mul(raw, scale);
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let weights = g.softmax(scores, 1)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    g.matmul(joined, wo)
}

/// `LN(s + FFN(s))` where `s = LN(stream + MHA(query, memory))`.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    heads: usize,
    stream: Var,
    query: Var,
    memory: Var,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let attn = multi_head_attention(g, store, p, heads, query, memory, mask)?;
    let h = g.add(stream, attn)?;
    let h = p.ln1.apply(g, store, h)?;

    let (w1, b1, w2, b2) = (
        g.param(store, p.w1),
        g.param(store, p.b1),
        g.param(store, p.w2),
        g.param(store, p.b2),
    );
    let hidden = g.matmul(h, w1)?;
    let hidden = g.add(hidden, b1)?;
    let hidden = g.gelu(hidden);
    let ff = g.matmul(hidden, w2)?;
    let ff = g.add(ff, b2)?;
    let out = g.add(h, ff)?;
    p.ln2.apply(g, store, out)
}

/// Stacked cross-attention from object features to their selected context.
/// `encoding` is added to `x` once before the first layer; `memory` holds the
/// selected rows of every object and `mask` restricts each query to its own rows.
#[allow(clippy::too_many_arguments)]
pub fn temporal_mha<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    layers: &[AttentionParams],
    heads: usize,
    x: Var,
    encoding: &Tensor<T>,
    memory: Var,
    mask: &Tensor<T>,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::contract("temporal attention needs at least one layer"));
    }
    let e = g.constant(encoding.clone());
    let mut stream = g.add(x, e)?;
    for p in layers {
        stream = attention_block(g, store, p, heads, stream, stream, memory, Some(mask))?;
    }
    Ok(stream)
}

/// Stacked self-attention among objects that share a group (frame).
/// `groups[r]` is the group of row `r`.
pub fn spatial_mha<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    layers: &[AttentionParams],
    heads: usize,
    x: Var,
    groups: &[usize],
) -> Result<Var> {
    if groups.is_empty() {
        return Err(Error::contract("spatial attention over an empty frame"));
    }
    if layers.is_empty() {
        return Err(Error::contract("spatial attention needs at least one layer"));
    }
    if g.shape(x)[0] != groups.len() {
        return Err(Error::shape("spatial_mha", g.shape(x), &[groups.len()]));
    }
    let single = groups.iter().all(|&f| f == groups[0]);
    let mask = if single { None } else { Some(group_mask(groups, groups)?) };
    let mut stream = x;
    for p in layers {
        stream = attention_block(g, store, p, heads, stream, stream, stream, mask.as_ref())?;
    }
    Ok(stream)
}
