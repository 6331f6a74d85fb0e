//! Mutual refinement across granularities.
//!
//! For every stage except the deepest, the unified features of all deeper
//! stages are concatenated and projected into a context map, gated by a spatial
//! and a channel attention mask, and appended to the stage's own tokens.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rfm::UnifiedStageFeature;
use crate::tensor::Tensor;

/// Context map `s_l`, `[b, h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeature {
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMasks {
    /// `[b, h, w, 1]`
    pub spatial: Tensor,
    /// `[b, 1, 1, c]`
    pub channel: Tensor,
}

/// Visual tokens `[b, t, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    pub tensor: Tensor,
}

impl TokenMatrix {
    pub fn num_tokens(&self) -> usize {
        self.tensor.dim(1)
    }
}

/// Squeeze width of the channel gate.
pub fn bottleneck(channels: usize) -> usize {
    (channels / 4).max(4)
}

#[derive(Clone, Debug)]
pub struct ContextParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ScabParams {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Concrete SCAB weights for the tensor-level entry point.
#[derive(Clone, Debug)]
pub struct ScabWeights {
    /// `[3, 3, c, 1]`
    pub conv_w: Tensor,
    /// `[1]`
    pub conv_b: Tensor,
    /// `[c, r]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[r, c]`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ScabWeights {
    pub fn zeros(channels: usize, r: usize) -> Self {
        Self {
            conv_w: Tensor::zeros(&[3, 3, channels, 1]),
            conv_b: Tensor::zeros(&[1]),
            w1: Tensor::zeros(&[channels, r]),
            b1: Tensor::zeros(&[r]),
            w2: Tensor::zeros(&[r, channels]),
            b2: Tensor::zeros(&[channels]),
        }
    }
}

/// Refinement parameters of one stage. The deepest stage has none.
#[derive(Clone, Debug)]
pub struct MrmStage {
    pub context: ContextParams,
    pub scab: ScabParams,
}

impl MrmStage {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        deeper: usize,
        channels: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let r = bottleneck(channels);
        let cin = deeper * channels;
        let mut reg = |name: &str, t: Tensor| store.register(format!("{prefix}.{name}"), t);
        let context = ContextParams {
            weight: reg("context.w", Tensor::randn(&[cin, channels], 1.0 / (cin as f64).sqrt(), rng)),
            bias: reg("context.b", Tensor::zeros(&[channels])),
        };
        let scab = ScabParams {
            conv_w: reg("spatial.w", Tensor::randn(&[3, 3, channels, 1], 1.0 / (9.0 * channels as f64).sqrt(), rng)),
            conv_b: reg("spatial.b", Tensor::zeros(&[1])),
            w1: reg("channel.w1", Tensor::randn(&[channels, r], (2.0 / channels as f64).sqrt(), rng)),
            b1: reg("channel.b1", Tensor::zeros(&[r])),
            w2: reg("channel.w2", Tensor::randn(&[r, channels], 1.0 / (r as f64).sqrt(), rng)),
            b2: reg("channel.b2", Tensor::zeros(&[channels])),
        };
        Self { context, scab }
    }
}

fn context_on_graph(g: &mut Graph, deeper: &[Var], weight: Var, bias: Var) -> Result<Var> {
    if deeper.is_empty() {
        return Err(shape_err!("the deepest stage has no context"));
    }
    let cat = if deeper.len() == 1 { deeper[0] } else { g.concat(deeper, 3)? };
    g.linear(cat, weight, Some(bias))
}

/// Returns `(u_hat, spatial gate, channel gate)`.
fn scab_on_graph(g: &mut Graph, s: Var, w: [Var; 6]) -> Result<(Var, Var, Var)> {
    let [conv_w, conv_b, w1, b1, w2, b2] = w;
    let logits = g.conv2d(s, conv_w, conv_b, 1, 1)?;
    let spatial = g.sigmoid(logits);
    let (_, h, wd, _) = g.value(s).dims4()?;
    let gap = if (h, wd) == (1, 1) { s } else { g.adaptive_avg_pool(s, 1, 1)? };
    let hidden = g.linear(gap, w1, Some(b1))?;
    let hidden = g.relu(hidden);
    let logits = g.linear(hidden, w2, Some(b2))?;
    let channel = g.sigmoid(logits);
    let gated = g.mul(s, spatial)?;
    let out = g.mul(gated, channel)?;
    Ok((out, spatial, channel))
}

fn flatten_on_graph(g: &mut Graph, x: Var) -> Result<Var> {
    let (b, h, w, c) = g.value(x).dims4()?;
    g.reshape(x, &[b, h * w, c])
}

fn tokens_on_graph(g: &mut Graph, own: Var, refined: Option<Var>) -> Result<Var> {
    let own_t = flatten_on_graph(g, own)?;
    match refined {
        None => Ok(own_t),
        Some(r) => {
            if g.shape(r) != g.shape(own) {
                return Err(shape_err!("refined features {:?} vs stage features {:?}", g.shape(r), g.shape(own)));
            }
            let r_t = flatten_on_graph(g, r)?;
            g.concat(&[own_t, r_t], 1)
        }
    }
}

/// Graph outputs of the refinement module for one stage.
#[derive(Clone, Copy, Debug)]
pub struct MrmOutput {
    pub tokens: Var,
    /// `(spatial, channel)` gates, absent for the deepest stage.
    pub gates: Option<(Var, Var)>,
}

/// Refines unified stage features `unified[0..L]`. `stages` holds one entry per
/// stage below the deepest.
pub fn mrm_forward(g: &mut Graph, p: &Bound, unified: &[Var], stages: &[MrmStage]) -> Result<Vec<MrmOutput>> {
    if unified.is_empty() || stages.len() + 1 != unified.len() {
        return Err(shape_err!("{} refinement stages for {} feature maps", stages.len(), unified.len()));
    }
    let mut out = Vec::with_capacity(unified.len());
    for (l, &own) in unified.iter().enumerate() {
        match stages.get(l) {
            Some(st) => {
                let s = context_on_graph(g, &unified[l + 1..], p[st.context.weight], p[st.context.bias])?;
                let w = &st.scab;
                let (u_hat, sp, ch) = scab_on_graph(g, s, [p[w.conv_w], p[w.conv_b], p[w.w1], p[w.b1], p[w.w2], p[w.b2]])?;
                out.push(MrmOutput { tokens: tokens_on_graph(g, own, Some(u_hat))?, gates: Some((sp, ch)) });
            }
            None => out.push(MrmOutput { tokens: tokens_on_graph(g, own, None)?, gates: None }),
        }
    }
    Ok(out)
}

/// Plain flattening of each stage, used when refinement is disabled.
pub fn plain_tokens(g: &mut Graph, unified: &[Var]) -> Result<Vec<Var>> {
    unified.iter().map(|&u| flatten_on_graph(g, u)).collect()
}

// Tensor-level entry points.

/// Context for stage `l` (1-based) of `g.len()` stages with a per-site map
/// `weight: [(L-l)*c, c]`.
pub fn build_context(g: &[UnifiedStageFeature], l: usize, weight: &Tensor, bias: &Tensor) -> Result<ContextFeature> {
    if l == 0 || l >= g.len() {
        return Err(shape_err!("context needs 1 <= l < L, got l={} with L={}", l, g.len()));
    }
    let mut graph = Graph::new();
    let deeper: Vec<Var> = g[l..].iter().map(|u| graph.input(u.tensor.clone())).collect();
    let w = graph.input(weight.clone());
    let b = graph.input(bias.clone());
    let s = context_on_graph(&mut graph, &deeper, w, b)?;
    Ok(ContextFeature { tensor: graph.value(s).clone() })
}

pub fn scab(s: &ContextFeature, w: &ScabWeights) -> Result<(Tensor, AttentionMasks)> {
    let mut g = Graph::new();
    let sv = g.input(s.tensor.clone());
    let ws = [&w.conv_w, &w.conv_b, &w.w1, &w.b1, &w.w2, &w.b2].map(|t| g.input(t.clone()));
    let (u, sp, ch) = scab_on_graph(&mut g, sv, ws)?;
    Ok((g.value(u).clone(), AttentionMasks { spatial: g.value(sp).clone(), channel: g.value(ch).clone() }))
}

pub fn augment_tokens(g_l: &UnifiedStageFeature, refined: Option<&Tensor>) -> Result<TokenMatrix> {
    let mut g = Graph::new();
    let own = g.input(g_l.tensor.clone());
    let r = refined.map(|t| g.input(t.clone()));
    let t = tokens_on_graph(&mut g, own, r)?;
    Ok(TokenMatrix { tensor: g.value(t).clone() })
}

/// Token `t` of a flattened `h x w` grid sits at `(t / w, t % w)`.
pub fn unflatten_index(t: usize, w: usize) -> (usize, usize) {
    (t / w, t % w)
}
