//! The assembled network: backbone, region mining, refinement and per-stage decoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::Backbone;
use crate::datamodel::{DatasetBundle, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::mrm::{mrm_forward, plain_tokens, MrmStage};
use crate::params::{Bound, ParamStore};
use crate::rfm::{RegionPrototypeBank, RfmStage, ShapeUnifier};
use crate::tensor::Tensor;
use crate::vsd::{decode_bound, mean_over_heads, DecoderParams};

/// Input geometry the network is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_attributes: usize,
    pub word_dim: usize,
}

impl InputShape {
    pub fn of(bundle: &DatasetBundle) -> Self {
        let (height, width) = bundle.image_hw();
        Self {
            height,
            width,
            channels: bundle.channels(),
            num_attributes: bundle.attribute_space.num_attributes(),
            word_dim: bundle.attribute_space.word_dim(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    input: InputShape,
    grid: (usize, usize),
    backbone: Backbone,
    /// Region mining per stage (full and mgm).
    rfm: Vec<RfmStage>,
    /// Plain projection of the deepest stage (baseline).
    projection: Option<ShapeUnifier>,
    /// One entry per stage below the deepest (full only).
    mrm: Vec<MrmStage>,
    decoders: Vec<DecoderParams>,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// `[b, d_s]` per decoded stage.
    pub zs: Vec<Var>,
    /// `[b * heads, d_s, t]` per decoded stage.
    pub attention: Vec<Var>,
    /// `[b, h_l, w_l, m_l]` per stage, empty for the baseline.
    pub masks: Vec<Var>,
    /// Unified `[b, h, w, c]` features per decoded stage.
    pub unified: Vec<Var>,
}

/// Concrete outputs of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub zs: Vec<Tensor>,
    /// `[b, d_s, t]`, head-averaged.
    pub attention: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub unified: Vec<Tensor>,
}

/// Rounds every parameter to the nearest `f32` so checkpoints are lossless.
pub(crate) fn round_to_f32(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = f64::from(*v as f32);
        }
    }
}

impl Model {
    /// Builds the network and its freshly initialized parameters.
    pub fn new(config: &ModelConfig, input: InputShape) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if config.word_dim != input.word_dim {
            return Err(Error::Config(format!(
                "config word dimension {} does not match the dataset's {}",
                config.word_dim, input.word_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let backbone =
            Backbone::new(input.channels, &config.backbone_widths, (input.height, input.width), &mut store, &mut rng)?;
        let l = config.num_stages;
        let deepest = backbone.stage_grid(l);
        let grid = match config.common_grid {
            None => deepest,
            Some([h, w]) => {
                if h > deepest.0 || w > deepest.1 {
                    return Err(Error::Config(format!(
                        "common grid {h}x{w} exceeds the deepest stage grid {}x{}",
                        deepest.0, deepest.1
                    )));
                }
                (h, w)
            }
        };
        let c = config.common_channels;
        let mut rfm = Vec::new();
        let mut projection = None;
        let mut mrm = Vec::new();
        match config.variant {
            Variant::Baseline => {
                projection = Some(ShapeUnifier::new("project", config.backbone_widths[l - 1], c, grid, &mut store, &mut rng));
            }
            Variant::Mgm | Variant::Full => {
                for s in 0..l {
                    let cl = config.backbone_widths[s];
                    rfm.push(RfmStage {
                        bank: RegionPrototypeBank::new(&format!("rfm.{s}"), config.parts_per_stage[s], cl, &mut store, &mut rng),
                        unifier: ShapeUnifier::new(&format!("rfm.{s}.unify"), cl, c, grid, &mut store, &mut rng),
                    });
                }
                if config.variant == Variant::Full {
                    for s in 0..l - 1 {
                        mrm.push(MrmStage::new(&format!("mrm.{s}"), l - 1 - s, c, &mut store, &mut rng));
                    }
                }
            }
        }
        let decoders = (0..config.decoded_stages())
            .map(|s| {
                DecoderParams::new(
                    &format!("vsd.{s}"),
                    input.word_dim,
                    c,
                    config.decoder_dim,
                    config.heads,
                    &mut store,
                    &mut rng,
                )
            })
            .collect();
        round_to_f32(&mut store);
        Ok((Self { config: config.clone(), input, grid, backbone, rfm, projection, mrm, decoders }, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    /// Common token grid.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn rfm_stages(&self) -> &[RfmStage] {
        &self.rfm
    }

    /// Token counts per decoded stage.
    pub fn token_counts(&self) -> Vec<usize> {
        let hw = self.grid.0 * self.grid.1;
        (0..self.decoders.len()).map(|s| if s < self.mrm.len() { 2 * hw } else { hw }).collect()
    }

    /// `images: [b, h, w, ch]`, `w_att: [d_s, d_w2v]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var, w_att: Var) -> Result<ForwardNodes> {
        let maps = self.backbone.forward(g, p, images)?;
        let (unified, masks) = match &self.projection {
            Some(proj) => (vec![proj.forward(g, p, *maps.last().expect("at least one stage"))?], Vec::new()),
            None => crate::rfm::rfm_forward(g, p, &maps, &self.rfm)?,
        };
        let tokens = if self.mrm.is_empty() {
            plain_tokens(g, &unified)?
        } else {
            mrm_forward(g, p, &unified, &self.mrm)?.into_iter().map(|o| o.tokens).collect()
        };
        let mut zs = Vec::with_capacity(tokens.len());
        let mut attention = Vec::with_capacity(tokens.len());
        for (t, d) in tokens.into_iter().zip(&self.decoders) {
            let out = decode_bound(g, p, t, w_att, d)?;
            zs.push(out.z);
            attention.push(out.attention);
        }
        Ok(ForwardNodes { zs, attention, masks, unified })
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, store: &ParamStore, images: &Tensor, word_vectors: &Tensor) -> Result<Inference> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.input(images.clone());
        let w = g.input(word_vectors.clone());
        let out = self.forward(&mut g, &p, x, w)?;
        let take = |vars: &[Var]| vars.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>();
        Ok(Inference {
            zs: take(&out.zs),
            attention: out
                .attention
                .iter()
                .map(|&a| mean_over_heads(g.value(a), self.config.heads))
                .collect::<Result<_>>()?,
            masks: take(&out.masks),
            unified: take(&out.unified),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::AttributeSpace;
    use crate::numerics::{compare_gradients, DEFAULT_STEP};
    use crate::objective::{loss_on_graph, LossWeights};

    pub(crate) fn micro_config(variant: Variant) -> (ModelConfig, InputShape) {
        let config = ModelConfig {
            variant,
            num_stages: 2,
            parts_per_stage: vec![2, 2],
            backbone_widths: vec![3, 4],
            common_grid: Some([2, 2]),
            common_channels: 4,
            decoder_dim: 4,
            heads: 1,
            word_dim: 3,
            ..ModelConfig::default()
        };
        let input = InputShape { height: 8, width: 8, channels: 2, num_attributes: 3, word_dim: 3 };
        (config, input)
    }

    #[test]
    fn variants_emit_expected_token_counts() {
        for (variant, counts) in
            [(Variant::Baseline, vec![4]), (Variant::Mgm, vec![4, 4]), (Variant::Full, vec![8, 4])]
        {
            let (config, input) = micro_config(variant);
            let (model, store) = Model::new(&config, input).unwrap();
            assert_eq!(model.token_counts(), counts);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let images = Tensor::uniform(&[2, 8, 8, 2], 0.0, 1.0, &mut rng);
            let out = model.infer(&store, &images, &Tensor::eye(3)).unwrap();
            assert_eq!(out.zs.len(), counts.len());
            for (a, &t) in out.attention.iter().zip(&counts) {
                assert_eq!(a.shape(), &[2, 3, t]);
            }
            assert!(out.zs.iter().all(|z| z.shape() == [2, 3] && z.all_finite()));
        }
    }

    #[test]
    fn parameters_are_f32_exact_and_seeded() {
        let (config, input) = micro_config(Variant::Full);
        let (_, a) = Model::new(&config, input).unwrap();
        let (_, b) = Model::new(&config, input).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(a.values().iter().flat_map(|t| t.data()).all(|&v| f64::from(v as f32) == v));
    }

    #[test]
    fn oversized_grid_and_word_dim_mismatch_rejected() {
        let (mut config, input) = micro_config(Variant::Full);
        config.common_grid = Some([4, 4]);
        assert!(matches!(Model::new(&config, input), Err(Error::Config(_))));
        let (mut config, input) = micro_config(Variant::Full);
        config.word_dim = 5;
        assert!(matches!(Model::new(&config, input), Err(Error::Config(_))));
    }

    /// Whole-model check of the training loss. Returns the worst relative error.
    pub(crate) fn whole_model_grad_check(variant: Variant) -> f64 {
        let (config, input) = micro_config(variant);
        let (model, store) = Model::new(&config, input).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let attrs = AttributeSpace::new(
            Tensor::uniform(&[3, 3], 0.0, 1.0, &mut rng),
            Tensor::randn(&[3, 3], 1.0, &mut rng),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let images = Tensor::uniform(&[1, 8, 8, 2], 0.0, 1.0, &mut rng);
        let seen = [0, 1];
        let labels = [1];
        let w = LossWeights::default();
        let loss = |params: &[Tensor], grads: bool| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|t| if grads { g.leaf(t.clone()) } else { g.input(t.clone()) }).collect();
            let p = Bound::from_vars(vars.clone());
            let x = g.input(images.clone());
            let wv = g.input(attrs.word_vectors.clone());
            let out = model.forward(&mut g, &p, x, wv).unwrap();
            let l = loss_on_graph(&mut g, &out.zs, &attrs, &seen, &labels, &w).unwrap().total;
            let value = g.value(l).item();
            if !grads {
                return (value, Vec::new());
            }
            let mut gr = g.backward(l);
            let gs = vars.iter().zip(params).map(|(&v, t)| gr.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
            (value, gs)
        };
        let params = store.values().to_vec();
        let (_, analytic) = loss(&params, true);
        let is_bank = |n: &str| n.ends_with(".prototypes") || n.ends_with(".log_sigma");
        let mut worst: f64 = 0.0;
        for (step, bank) in [(DEFAULT_STEP, false), (1e-2, true)] {
            let rep = compare_gradients(store.names(), &params, &analytic, |x| loss(x, false).0, step).unwrap();
            for e in rep.entries.iter().filter(|e| is_bank(&e.name) == bank) {
                worst = worst.max(e.max_rel_err);
            }
        }
        worst
    }

    #[test]
    fn whole_model_gradient_matches_finite_differences() {
        for v in [Variant::Baseline, Variant::Mgm, Variant::Full] {
            let err = whole_model_grad_check(v);
            assert!(err < 1e-3, "{v:?}: {err}");
        }
    }
}
