//! Differentiable building blocks: affine maps, layer norm, multi-head
//! attention and post-norm transformer blocks.
//!
//! Parameters are looked up by prefix on a [`Graph`]; the matching `init_*`
//! functions create them in a [`ParamStore`].

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;

/// Standard deviation used for freshly initialized weights.
pub const INIT_STD: f64 = 0.02;

/// Shape of a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

pub fn init_linear<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.init_weight(format!("{prefix}.w"), fan_in, fan_out, INIT_STD, rng);
    store.init_zeros(format!("{prefix}.b"), 1, fan_out);
}

pub fn init_layer_norm<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, dim: usize) {
    store.init_ones(format!("{prefix}.gamma"), 1, dim);
    store.init_zeros(format!("{prefix}.beta"), 1, dim);
}

pub fn init_attention<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, prefix: &str, dim: usize, rng: &mut R) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{p}"), dim, dim, rng);
    }
}

pub fn init_block<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, prefix: &str, dims: BlockDims, rng: &mut R) {
    init_attention(store, &format!("{prefix}.attn"), dims.dim, rng);
    init_layer_norm(store, &format!("{prefix}.ln1"), dims.dim);
    init_linear(store, &format!("{prefix}.ffn.in"), dims.dim, dims.ffn, rng);
    init_linear(store, &format!("{prefix}.ffn.out"), dims.ffn, dims.dim, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), dims.dim);
}

/// `x · W + b`.
pub fn linear<S: Scalar>(g: &Graph<'_, S>, x: Var, prefix: &str) -> Result<Var> {
    let t = g.tape();
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let xw = t.matmul(x, w)?;
    t.add_row(xw, b)
}

pub fn layer_norm<S: Scalar>(g: &Graph<'_, S>, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    g.tape().layer_norm(x, gamma, beta)
}

/// Multi-head scaled dot-product attention with input and output projections.
///
/// `query` is `n x d`, `key_value` is `m x d`; each head attends over a
/// `d / heads` slice of the projected vectors and head outputs are
/// concatenated before the output projection.
pub fn multi_head_attention<S: Scalar>(g: &Graph<'_, S>, query: Var, key: Var, value: Var, heads: usize, prefix: &str) -> Result<Var> {
    let t = g.tape();
    let n = t.shape(query).0;
    let m = t.shape(key).0;
    multi_head_attention_grouped(g, query, key, value, heads, prefix, &[0..n], &[0..m])
}

/// Attention over several independent sequences packed row-wise: the rows
/// of `query_groups[i]` attend only to the rows of `key_groups[i]`.
/// `query_groups` must partition the query rows in order.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention_grouped<S: Scalar>(
    g: &Graph<'_, S>,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    prefix: &str,
    query_groups: &[Range<usize>],
    key_groups: &[Range<usize>],
) -> Result<Var> {
    let t = g.tape();
    let (nq, dq) = t.shape(query);
    let (mk, dk) = t.shape(key);
    let (mv, dv) = t.shape(value);
    if dq != dk || dk != dv {
        return Err(Error::Shape {
            op: "multi_head_attention",
            left: t.shape(query),
            right: t.shape(key),
        });
    }
    if mk != mv {
        return Err(Error::Shape {
            op: "multi_head_attention",
            left: t.shape(key),
            right: t.shape(value),
        });
    }
    if query_groups.len() != key_groups.len() {
        return Err(Error::Invalid(format!(
            "{} query groups but {} key groups",
            query_groups.len(),
            key_groups.len()
        )));
    }
    let mut next = 0;
    for (qg, kg) in query_groups.iter().zip(key_groups) {
        if qg.start != next || qg.end < qg.start {
            return Err(Error::Invalid("query groups must partition the query rows in order".into()));
        }
        next = qg.end;
        if kg.is_empty() {
            return Err(Error::NoAttentionTargets);
        }
        if kg.end > mk {
            return Err(Error::OutOfRange {
                what: "key group",
                index: kg.end,
                limit: mk,
            });
        }
    }
    if next != nq {
        return Err(Error::Invalid("query groups must partition the query rows in order".into()));
    }
    if heads == 0 || dq % heads != 0 {
        return Err(Error::Config(format!("dim {dq} not divisible by {heads} heads")));
    }
    let q = linear(g, query, &format!("{prefix}.q"))?;
    let k = linear(g, key, &format!("{prefix}.k"))?;
    let v = linear(g, value, &format!("{prefix}.v"))?;
    let dh = dq / heads;
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let single = query_groups.len() == 1 && query_groups[0] == (0..nq) && key_groups[0] == (0..mk);
    let rows = |x: Var, r: &Range<usize>| -> Result<Var> {
        if single {
            Ok(x)
        } else {
            t.select_rows(x, &r.clone().collect::<Vec<_>>())
        }
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                t.slice_cols(q, h * dh, dh)?,
                t.slice_cols(k, h * dh, dh)?,
                t.slice_cols(v, h * dh, dh)?,
            )
        };
        let mut parts = Vec::with_capacity(query_groups.len());
        for (qg, kg) in query_groups.iter().zip(key_groups) {
            if qg.is_empty() {
                continue;
            }
            let scores = t.scale(t.matmul_t(rows(qh, qg)?, rows(kh, kg)?)?, scale);
            let weights = t.softmax_rows(scores);
            parts.push(t.matmul(weights, rows(vh, kg)?)?);
        }
        outs.push(if parts.len() == 1 { parts[0] } else { t.concat_rows(&parts)? });
    }
    let ctx = if heads == 1 { outs[0] } else { t.concat_cols(&outs)? };
    linear(g, ctx, &format!("{prefix}.o"))
}

/// Position-wise feed-forward network with GELU.
pub fn feed_forward<S: Scalar>(g: &Graph<'_, S>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.in"))?;
    let h = g.tape().gelu(h);
    linear(g, h, &format!("{prefix}.out"))
}

/// Post-norm block where `query` attends to `key_value`:
/// `a = LN(q + MHA(q, kv, kv))`, `out = LN(a + FFN(a))`.
pub fn attention_block<S: Scalar>(g: &Graph<'_, S>, query: Var, key_value: Var, heads: usize, prefix: &str) -> Result<Var> {
    let n = g.tape().shape(query).0;
    let m = g.tape().shape(key_value).0;
    attention_block_grouped(g, query, key_value, heads, prefix, &[0..n], &[0..m])
}

/// [`attention_block`] over packed sequences; see [`multi_head_attention_grouped`].
pub fn attention_block_grouped<S: Scalar>(
    g: &Graph<'_, S>,
    query: Var,
    key_value: Var,
    heads: usize,
    prefix: &str,
    query_groups: &[Range<usize>],
    key_groups: &[Range<usize>],
) -> Result<Var> {
    let t = g.tape();
    if t.shape(query).0 == 0 {
        return Err(Error::Invalid("transformer block on an empty sequence".into()));
    }
    let attn = multi_head_attention_grouped(g, query, key_value, key_value, heads, &format!("{prefix}.attn"), query_groups, key_groups)?;
    let a = layer_norm(g, t.add(query, attn)?, &format!("{prefix}.ln1"))?;
    let f = feed_forward(g, a, &format!("{prefix}.ffn"))?;
    layer_norm(g, t.add(a, f)?, &format!("{prefix}.ln2"))
}

/// Self-attention transformer block.
pub fn transformer_block<S: Scalar>(g: &Graph<'_, S>, h: Var, heads: usize, prefix: &str) -> Result<Var> {
    attention_block(g, h, h, heads, prefix)
}
