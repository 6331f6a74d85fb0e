//! Region feature mining: soft assignment of spatial features to learnable
//! prototypes, mask-weighted aggregation, and projection of every stage onto a
//! common `H x W x C` grid.
//!
//! The masks form a partition of unity over prototypes at every site, so the
//! prototype-averaged aggregation `(1/M) sum_m a_m * f` equals `f / M`; the
//! masks themselves are kept for inspection and export.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Prototypes `[m, c]` and log smoothing factors `[m]` (`sigma = exp(rho)`).
#[derive(Clone, Debug)]
pub struct RegionPrototypeBank {
    pub prototypes: ParamId,
    pub log_sigma: ParamId,
    parts: usize,
    channels: usize,
}

impl RegionPrototypeBank {
    pub fn new<R: Rng + ?Sized>(prefix: &str, parts: usize, channels: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let std = 1.0 / (channels as f64).sqrt();
        let prototypes = store.register(format!("{prefix}.prototypes"), Tensor::randn(&[parts, channels], std, rng));
        let log_sigma = store.register(format!("{prefix}.log_sigma"), Tensor::zeros(&[parts]));
        Self { prototypes, log_sigma, parts, channels }
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sigma(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.log_sigma).data().iter().map(|r| r.exp()).collect()
    }

    /// `[b, h, w, m]` masks on the graph.
    pub fn masks(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        g.region_masks(f, p[self.prototypes], p[self.log_sigma])
    }
}

/// Per-site region probabilities, `[b, m, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub masks: Tensor,
}

impl RegionMasks {
    /// From the graph layout `[b, h, w, m]`.
    pub fn from_nhwm(t: &Tensor) -> Result<Self> {
        Ok(Self { masks: t.permute(&[0, 3, 1, 2])? })
    }

    pub fn parts(&self) -> usize {
        self.masks.dim(1)
    }

    /// Back to `[b, h, w, m]`.
    pub fn to_nhwm(&self) -> Tensor {
        self.masks.permute(&[0, 2, 3, 1]).expect("rank 4")
    }
}

/// A stage's features on the common grid, `[b, h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedStageFeature {
    pub tensor: Tensor,
}

/// Adaptive average pooling to the common grid followed by a per-site linear map
/// `c_l -> c`.
#[derive(Clone, Debug)]
pub struct ShapeUnifier {
    pub weight: ParamId,
    pub bias: ParamId,
    target: (usize, usize),
}

impl ShapeUnifier {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        target: (usize, usize),
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (in_channels as f64).sqrt();
        let weight = store.register(format!("{prefix}.w"), Tensor::randn(&[in_channels, out_channels], std, rng));
        let bias = store.register(format!("{prefix}.b"), Tensor::zeros(&[out_channels]));
        Self { weight, bias, target }
    }

    pub fn target(&self) -> (usize, usize) {
        self.target
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let pooled = unify_pool(g, x, self.target)?;
        g.linear(pooled, p[self.weight], Some(p[self.bias]))
    }
}

fn unify_pool(g: &mut Graph, x: Var, target: (usize, usize)) -> Result<Var> {
    let (_, h, w, _) = g.value(x).dims4()?;
    if target.0 > h || target.1 > w {
        return Err(shape_err!("target grid {:?} is larger than the {}x{} source", target, h, w));
    }
    if (h, w) == target {
        Ok(x)
    } else {
        g.adaptive_avg_pool(x, target.0, target.1)
    }
}

/// `(1/M) * sum_m a_m (.) f` with masks broadcast over channels.
pub fn aggregate_on_graph(g: &mut Graph, f: Var, masks_nhwm: Var) -> Result<Var> {
    let parts = *g.shape(masks_nhwm).last().ok_or_else(|| shape_err!("masks of rank 0"))?;
    let fs = g.shape(f);
    let ms = g.shape(masks_nhwm);
    if fs.len() != 4 || ms.len() != 4 || fs[..3] != ms[..3] {
        return Err(shape_err!("features {:?} vs masks {:?}", fs, ms));
    }
    let total = g.sum_last(masks_nhwm)?;
    let weight = g.scale(total, 1.0 / parts as f64);
    g.mul(f, weight)
}

/// One stage of region mining: prototype bank plus shape unifier.
#[derive(Clone, Debug)]
pub struct RfmStage {
    pub bank: RegionPrototypeBank,
    pub unifier: ShapeUnifier,
}

impl RfmStage {
    /// Returns `(g_l, masks [b, h_l, w_l, m])`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<(Var, Var)> {
        let masks = self.bank.masks(g, p, f)?;
        let agg = aggregate_on_graph(g, f, masks)?;
        let unified = self.unifier.forward(g, p, agg)?;
        Ok((unified, masks))
    }
}

/// Runs region mining on every stage. Returns unified features and masks per stage.
pub fn rfm_forward(g: &mut Graph, p: &Bound, stage_maps: &[Var], stages: &[RfmStage]) -> Result<(Vec<Var>, Vec<Var>)> {
    if stage_maps.len() != stages.len() {
        return Err(shape_err!("{} feature maps for {} region-mining stages", stage_maps.len(), stages.len()));
    }
    let mut unified = Vec::with_capacity(stages.len());
    let mut masks = Vec::with_capacity(stages.len());
    for (&f, stage) in stage_maps.iter().zip(stages) {
        let (u, m) = stage.forward(g, p, f)?;
        unified.push(u);
        masks.push(m);
    }
    Ok((unified, masks))
}

// Tensor-level entry points.

/// Masks for features `f: [b, h, w, c]`, prototypes `[m, c]` and positive `sigma: [m]`.
pub fn region_masks(f: &Tensor, prototypes: &Tensor, sigma: &[f64]) -> Result<RegionMasks> {
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(shape_err!("smoothing factors must be positive, got {:?}", sigma));
    }
    let mut g = Graph::new();
    let fv = g.input(f.clone());
    let pv = g.input(prototypes.clone());
    let rho = g.input(Tensor::new(&[sigma.len()], sigma.iter().map(|s| s.ln()).collect())?);
    let m = g.region_masks(fv, pv, rho)?;
    RegionMasks::from_nhwm(g.value(m))
}

/// Mask-weighted aggregation of `f: [b, h, w, c]`.
pub fn aggregate_regions(f: &Tensor, masks: &RegionMasks) -> Result<Tensor> {
    let mut g = Graph::new();
    let fv = g.input(f.clone());
    let mv = g.input(masks.to_nhwm());
    let out = aggregate_on_graph(&mut g, fv, mv)?;
    Ok(g.value(out).clone())
}

/// Pools `x` to `target` and projects channels with `weight: [c_l, c]`, `bias: [c]`.
pub fn unify_shape(x: &Tensor, target: (usize, usize), weight: &Tensor, bias: &Tensor) -> Result<UnifiedStageFeature> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.input(weight.clone());
    let bv = g.input(bias.clone());
    let pooled = unify_pool(&mut g, xv, target)?;
    let out = g.linear(pooled, wv, Some(bv))?;
    Ok(UnifiedStageFeature { tensor: g.value(out).clone() })
}
