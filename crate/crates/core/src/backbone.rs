//! Staged convolutional feature extractor.
//!
//! Stage `l` is `conv3x3 -> bias+ReLU -> conv3x3/stride 2 -> bias+ReLU`, so its
//! output grid is the input grid divided by `2^l`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatureMap {
    /// 1-based stage index.
    pub stage: usize,
    /// `[b, h_l, w_l, c_l]`
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
struct StageParams {
    conv_w: ParamId,
    conv_b: ParamId,
    down_w: ParamId,
    down_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<StageParams>,
    widths: Vec<usize>,
    input_hw: (usize, usize),
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        widths: &[usize],
        input_hw: (usize, usize),
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        let stride = 1usize << widths.len();
        if input_hw.0 == 0 || input_hw.1 == 0 || input_hw.0 % stride != 0 || input_hw.1 % stride != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by the cumulative stride {} of {} stages",
                input_hw.0,
                input_hw.1,
                stride,
                widths.len()
            )));
        }
        let mut cin = in_channels;
        let mut stages = Vec::with_capacity(widths.len());
        for (l, &cout) in widths.iter().enumerate() {
            let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
            let conv_w = store.register(format!("backbone.{l}.conv.w"), Tensor::randn(&[3, 3, cin, cout], he(9 * cin), rng));
            let conv_b = store.register(format!("backbone.{l}.conv.b"), Tensor::zeros(&[cout]));
            let down_w = store.register(format!("backbone.{l}.down.w"), Tensor::randn(&[3, 3, cout, cout], he(9 * cout), rng));
            let down_b = store.register(format!("backbone.{l}.down.b"), Tensor::zeros(&[cout]));
            stages.push(StageParams { conv_w, conv_b, down_w, down_b });
            cin = cout;
        }
        Ok(Self { stages, widths: widths.to_vec(), input_hw })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Grid of stage `l` (1-based).
    pub fn stage_grid(&self, l: usize) -> (usize, usize) {
        (self.input_hw.0 >> l, self.input_hw.1 >> l)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<Vec<Var>> {
        let (_, h, w, _) = g.value(images).dims4()?;
        if (h, w) != self.input_hw {
            return Err(Error::Shape(format!("backbone built for {:?}, got {}x{}", self.input_hw, h, w)));
        }
        let mut x = images;
        let mut outs = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let y = g.conv2d(x, p[s.conv_w], p[s.conv_b], 1, 1)?;
            let y = g.relu(y);
            let z = g.conv2d(y, p[s.down_w], p[s.down_b], 2, 1)?;
            x = g.relu(z);
            outs.push(x);
        }
        Ok(outs)
    }

    /// Evaluates all stages on concrete tensors.
    pub fn extract_stages(&self, store: &ParamStore, images: &Tensor) -> Result<Vec<StageFeatureMap>> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.input(images.clone());
        let outs = self.forward(&mut g, &p, x)?;
        Ok(outs
            .into_iter()
            .enumerate()
            .map(|(l, v)| StageFeatureMap { stage: l + 1, tensor: g.value(v).clone() })
            .collect())
    }
}
