//! Visual-semantic decoder: attribute word vectors attend over visual tokens and
//! each decoded token is scored against its own word vector.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{resize_bilinear, Tensor};

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// `[d_w2v, d_model]`
    pub wq: ParamId,
    /// `[c, d_model]`
    pub wk: ParamId,
    pub wv: ParamId,
    /// `[d_model, d_model]`
    pub wo: ParamId,
    /// `[d_model, d_w2v]`
    pub embed: ParamId,
    pub heads: usize,
}

impl DecoderParams {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        word_dim: usize,
        channels: usize,
        d_model: usize,
        heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let mut reg = |name: &str, rows: usize, cols: usize, rng: &mut R| {
            store.register(format!("{prefix}.{name}"), Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng))
        };
        Self {
            wq: reg("wq", word_dim, d_model, rng),
            wk: reg("wk", channels, d_model, rng),
            wv: reg("wv", channels, d_model, rng),
            wo: reg("wo", d_model, d_model, rng),
            embed: reg("embed", d_model, word_dim, rng),
            heads,
        }
    }
}

/// Concrete decoder weights for the tensor-level entry point.
#[derive(Clone, Debug)]
pub struct DecoderWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub embed: Tensor,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPrediction {
    /// `[b, d_s]`
    pub z: Tensor,
    /// `[b, d_s, t]`, averaged over heads.
    pub attention: Tensor,
}

/// Graph outputs of one decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub z: Var,
    /// `[b * heads, d_s, t]`
    pub attention: Var,
}

/// `w = [wq, wk, wv, wo, embed]`, tokens `[b, t, c]`, `w_att: [d_s, d_w2v]`.
pub fn decode_on_graph(g: &mut Graph, tokens: Var, w_att: Var, w: [Var; 5], heads: usize) -> Result<DecoderOutput> {
    let [wq, wk, wv, wo, embed] = w;
    let (b, t, _) = g.value(tokens).dims3()?;
    let (ds, _) = g.value(w_att).dims2()?;
    let (_, dm) = g.value(wq).dims2()?;
    if heads == 0 || dm % heads != 0 {
        return Err(shape_err!("{} heads do not divide d_model {}", heads, dm));
    }
    let dh = dm / heads;
    let q = g.linear(w_att, wq, None)?;
    let q = g.broadcast_batch(q, b)?;
    let k = g.linear(tokens, wk, None)?;
    let v = g.linear(tokens, wv, None)?;

    let split = |g: &mut Graph, x: Var, rows: usize| -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let x = g.reshape(x, &[b, rows, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * heads, rows, dh])
    };
    let (qh, kh, vh) = (split(g, q, ds)?, split(g, k, t)?, split(g, v, t)?);
    let logits = g.bmm(qh, kh, true)?;
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
    let attention = g.softmax_last(logits)?;
    let mut p = g.bmm(attention, vh, false)?;
    if heads > 1 {
        p = g.reshape(p, &[b, heads, ds, dh])?;
        p = g.permute(p, &[0, 2, 1, 3])?;
        p = g.reshape(p, &[b, ds, dm])?;
    }
    let p = g.linear(p, wo, None)?;
    let projected = g.linear(p, embed, None)?;
    let (_, dw) = g.value(w_att).dims2()?;
    let w_b = g.reshape(w_att, &[1, ds, dw])?;
    let scored = g.mul(projected, w_b)?;
    let z = g.sum_last(scored)?;
    let z = g.squeeze_last(z)?;
    Ok(DecoderOutput { z, attention })
}

pub fn decode_bound(g: &mut Graph, p: &Bound, tokens: Var, w_att: Var, d: &DecoderParams) -> Result<DecoderOutput> {
    decode_on_graph(g, tokens, w_att, [p[d.wq], p[d.wk], p[d.wv], p[d.wo], p[d.embed]], d.heads)
}

/// Head-averaged attention `[b, d_s, t]` from the `[b * heads, d_s, t]` graph layout.
pub fn mean_over_heads(att: &Tensor, heads: usize) -> Result<Tensor> {
    let (bh, ds, t) = att.dims3()?;
    if heads == 0 || bh % heads != 0 {
        return Err(shape_err!("attention {:?} with {} heads", att.shape(), heads));
    }
    if heads == 1 {
        return Ok(att.clone());
    }
    let b = bh / heads;
    let block = ds * t;
    let mut out = vec![0.0; b * block];
    for (i, chunk) in att.data().chunks(block).enumerate() {
        let dst = &mut out[(i / heads) * block..(i / heads + 1) * block];
        for (o, v) in dst.iter_mut().zip(chunk) {
            *o += v / heads as f64;
        }
    }
    Tensor::new(&[b, ds, t], out)
}

/// Tensor-level decoder pass over tokens `[b, t, c]`.
pub fn vsd_forward(tokens: &Tensor, w_att: &Tensor, w: &DecoderWeights) -> Result<SemanticPrediction> {
    let mut g = Graph::new();
    let tv = g.input(tokens.clone());
    let av = g.input(w_att.clone());
    let ws = [&w.wq, &w.wk, &w.wv, &w.wo, &w.embed].map(|t| g.input(t.clone()));
    let out = decode_on_graph(&mut g, tv, av, ws, w.heads)?;
    Ok(SemanticPrediction { z: g.value(out.z).clone(), attention: mean_over_heads(g.value(out.attention), w.heads)? })
}

/// Per-attribute `h x w` maps `[b, d_s, h, w]` from attention over `t` tokens.
///
/// With `2 * h * w` tokens the own-feature and refined halves are summed, so
/// every map remains a distribution over grid cells.
pub fn attention_maps(attention: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (b, ds, t) = attention.dims3()?;
    let hw = grid.0 * grid.1;
    if t != hw && t != 2 * hw {
        return Err(shape_err!("{} tokens do not match a {}x{} grid", t, grid.0, grid.1));
    }
    let mut out = vec![0.0; b * ds * hw];
    for (row, dst) in attention.data().chunks(t).zip(out.chunks_mut(hw)) {
        for half in row.chunks(hw) {
            for (o, v) in dst.iter_mut().zip(half) {
                *o += v;
            }
        }
    }
    Tensor::new(&[b, ds, grid.0, grid.1], out)
}

/// Mean of per-stage maps after bilinear resizing to `size`.
pub fn fuse_maps(maps: &[Tensor], size: (usize, usize)) -> Result<Tensor> {
    let first = maps.first().ok_or_else(|| shape_err!("no attention maps to fuse"))?;
    let (b, ds, _, _) = first.dims4()?;
    let mut out = Tensor::zeros(&[b, ds, size.0, size.1]);
    for m in maps {
        let (mb, mds, h, w) = m.dims4()?;
        if (mb, mds) != (b, ds) {
            return Err(shape_err!("attention maps {:?} vs {:?}", m.shape(), first.shape()));
        }
        let resized: Vec<f64> =
            m.data().chunks(h * w).flat_map(|plane| resize_bilinear(plane, h, w, size.0, size.1)).collect();
        for (o, v) in out.data_mut().iter_mut().zip(resized) {
            *o += v / maps.len() as f64;
        }
    }
    Ok(out)
}
