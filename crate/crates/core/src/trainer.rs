//! SGD training loop, periodic evaluation and the checkpoint container.
//!
//! Checkpoint layout: 8-byte magic, little-endian `u64` header length, a JSON
//! header, then every tensor as contiguous little-endian `f32` values in the
//! order the header lists them.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::binio::{checked_numel, decode_f32_as_f64, encode_f64_as_f32};
use crate::datamodel::{DatasetBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::model::{round_to_f32, InputShape, Model};
use crate::objective::{loss_on_graph, LossBreakdown, LossWeights, StageLoss};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MGMRNCKP";
const CHECKPOINT_FORMAT: &str = "mgmrn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub t1: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
}

impl From<&EvalReport> for Metrics {
    fn from(r: &EvalReport) -> Self {
        Self { t1: r.t1, u: r.u, s: r.s, h: r.h }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Per-sample mean over the epoch.
    pub loss: LossBreakdown,
    pub metrics: Option<Metrics>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub params: ParamStore,
    /// Momentum buffers, one per parameter.
    pub velocity: Vec<Tensor>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &ModelConfig, input: InputShape) -> Result<Self> {
        let (model, params) = Model::new(config, input)?;
        let velocity = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self { model, params, velocity, epoch: 0, history: Vec::new() })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    fn loss_weights(&self) -> LossWeights {
        let c = self.config();
        LossWeights { lambda_sce: c.lambda_sce, lambda_ar: c.lambda_ar, temperature: c.sce_temperature }
    }

    /// Shuffle order of the training split for `epoch` (0-based).
    pub fn epoch_order(&self, train: &[usize], epoch: usize) -> Vec<usize> {
        let seed = self.config().seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut order = train.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }
}

/// One SGD-with-momentum update on the batch `indices`.
pub fn train_step(state: &mut TrainState, bundle: &DatasetBundle, indices: &[usize]) -> Result<LossBreakdown> {
    let weights = state.loss_weights();
    let mut g = Graph::new();
    let p = state.params.bind(&mut g);
    let x = g.input(bundle.batch(indices));
    let w = g.input(bundle.attribute_space.word_vectors.clone());
    let out = state.model.forward(&mut g, &p, x, w)?;
    let labels = bundle.labels_of(indices);
    let nodes = loss_on_graph(&mut g, &out.zs, &bundle.attribute_space, &bundle.seen_classes, &labels, &weights)?;
    let name_of = |node: usize| {
        p.vars().iter().position(|v| v.index() == node).map(|i| state.params.names()[i].clone())
    };
    if let Some((node, op)) = g.first_non_finite() {
        let what = if node == x.index() {
            "input batch".to_string()
        } else {
            name_of(node).unwrap_or_else(|| format!("{op} output (node {node})"))
        };
        return Err(Error::NonFinite(format!("forward pass: {what}")));
    }
    let breakdown = nodes.breakdown(&g);
    let mut grads = g.backward(nodes.total);

    let c = state.config().clone();
    let ids: Vec<_> = state.params.ids().collect();
    let mut updates = Vec::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        let grad = grads.take(p[id]);
        if let Some(gr) = &grad {
            if !gr.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", state.params.name(id))));
            }
        }
        updates.push((i, id, grad));
    }
    for (i, id, grad) in updates {
        let param = state.params.get_mut(id);
        let vel = &mut state.velocity[i];
        let gd = grad.as_ref().map(|t| t.data());
        for (j, (w, v)) in param.data_mut().iter_mut().zip(vel.data_mut()).enumerate() {
            let d = gd.map_or(0.0, |g| g[j]) + c.weight_decay * *w;
            *v = f64::from((c.momentum * *v + d) as f32);
            *w = f64::from((*w - c.learning_rate * *v) as f32);
        }
    }
    Ok(breakdown)
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    /// Parameters at the evaluation with the highest harmonic mean.
    pub best: Option<(usize, ParamStore, Metrics)>,
}

fn mean_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown, weight: f64) {
    if acc.stages.is_empty() {
        acc.stages = vec![StageLoss::default(); b.stages.len()];
    }
    acc.total += weight * b.total;
    for (a, s) in acc.stages.iter_mut().zip(&b.stages) {
        a.sce += weight * s.sce;
        a.ar += weight * s.ar;
    }
}

/// Trains for `config.epochs` epochs, evaluating every `eval_every` epochs and
/// after the last one. `observe` sees each finished epoch.
pub fn fit(config: &ModelConfig, bundle: &DatasetBundle, mut observe: impl FnMut(&EpochRecord)) -> Result<FitOutcome> {
    let state = TrainState::new(config, InputShape::of(bundle))?;
    continue_fit(state, bundle, config.epochs, &mut observe)
}

/// Continues training `state` until `epochs` epochs have completed.
pub fn continue_fit(
    mut state: TrainState,
    bundle: &DatasetBundle,
    epochs: usize,
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    if bundle.split.train.is_empty() && epochs > state.epoch {
        return Err(Error::EmptySplit("train"));
    }
    let batch = state.config().batch_size;
    let eval_every = state.config().eval_every;
    let mut best: Option<(usize, ParamStore, Metrics)> = None;
    while state.epoch < epochs {
        let order = state.epoch_order(&bundle.split.train, state.epoch);
        let mut loss = LossBreakdown::default();
        for chunk in order.chunks(batch) {
            let b = train_step(&mut state, bundle, chunk)?;
            mean_breakdown(&mut loss, &b, chunk.len() as f64 / order.len() as f64);
        }
        state.epoch += 1;
        let due = state.epoch == epochs || (eval_every > 0 && state.epoch % eval_every == 0);
        let metrics = if due {
            let m = Metrics::from(&evaluate(&state.model, &state.params, bundle, batch.max(64), EvalOptions::default())?);
            if best.as_ref().is_none_or(|(_, _, b)| m.h > b.h) {
                best = Some((state.epoch, state.params.clone(), m));
            }
            Some(m)
        } else {
            None
        };
        let record = EpochRecord { epoch: state.epoch, loss, metrics };
        observe(&record);
        state.history.push(record);
    }
    Ok(FitOutcome { state, best })
}

// ---------------------------------------------------------------- checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub input: InputShape,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub tensors: Vec<BlobSpec>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self::from_parts(state, &state.params, state.epoch)
    }

    fn from_parts(state: &TrainState, params: &ParamStore, epoch: usize) -> Self {
        let mut tensors: Vec<(String, Tensor)> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tensors.extend(
            params.names().iter().zip(&state.velocity).map(|(n, v)| (format!("{MOMENTUM_PREFIX}{n}"), v.clone())),
        );
        let mut offset = 0;
        let specs = tensors
            .iter()
            .map(|(name, t)| {
                let spec = BlobSpec { name: name.clone(), shape: t.shape().to_vec(), offset, len: 4 * t.len() };
                offset += spec.len;
                spec
            })
            .collect();
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                config: state.config().clone(),
                input: state.model.input_shape(),
                epoch,
                history: state.history.clone(),
                tensors: specs,
            },
            tensors,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.header.tensors.iter().map(|s| s.len).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            out.extend(encode_f64_as_f32(t.data()));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[16..];
        let hlen = usize::try_from(hlen).ok().filter(|&h| h <= rest.len()).ok_or_else(|| bad("header length past end of file".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&rest[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format {:?} version {}", header.format, header.version)));
        }
        let blobs = &rest[hlen..];
        let mut expected = 0usize;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for spec in &header.tensors {
            let numel = checked_numel(&spec.shape)?;
            if spec.offset != expected || numel.checked_mul(4) != Some(spec.len) {
                return Err(bad(format!("tensor {} has inconsistent offset or length", spec.name)));
            }
            let end = spec.offset.checked_add(spec.len).filter(|&e| e <= blobs.len());
            let end = end.ok_or_else(|| bad(format!("tensor {} runs past end of file", spec.name)))?;
            let data = decode_f32_as_f64(&blobs[spec.offset..end])?;
            tensors.push((spec.name.clone(), Tensor::new(&spec.shape, data)?));
            expected = end;
        }
        if expected != blobs.len() {
            return Err(bad(format!("{} trailing bytes", blobs.len() - expected)));
        }
        Ok(Self { header, tensors })
    }

    /// Rebuilds the training state, checking names and shapes against the model.
    pub fn into_state(self) -> Result<TrainState> {
        let mut state = TrainState::new(&self.header.config, self.header.input)?;
        let bad = |m: String| Error::Checkpoint(m);
        let names = state.params.names().to_vec();
        let mut seen_params = vec![false; names.len()];
        let mut seen_momentum = vec![false; names.len()];
        for (name, t) in self.tensors {
            let (is_momentum, base) = match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(b) => (true, b),
                None => (false, name.as_str()),
            };
            let i = names.iter().position(|n| n == base).ok_or_else(|| bad(format!("unknown tensor {name}")))?;
            let id = state.params.find(base).expect("known name");
            if t.shape() != state.params.get(id).shape() {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), state.params.get(id).shape())));
            }
            if is_momentum {
                state.velocity[i] = t;
                seen_momentum[i] = true;
            } else {
                state.params.set(id, t)?;
                seen_params[i] = true;
            }
        }
        if let Some(i) = seen_params.iter().position(|s| !s) {
            return Err(bad(format!("missing tensor {}", names[i])));
        }
        if let Some(i) = seen_momentum.iter().position(|s| !s) {
            return Err(bad(format!("missing momentum for {}", names[i])));
        }
        round_to_f32(&mut state.params);
        state.epoch = self.header.epoch;
        state.history = self.header.history;
        Ok(state)
    }
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, Checkpoint::from_state(state).encode()?).map_err(|e| Error::io(path, e))
}

/// Saves `params` in place of the state's current parameters.
pub fn save_checkpoint_with(state: &TrainState, params: &ParamStore, epoch: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, Checkpoint::from_parts(state, params, epoch).encode()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)?.into_state()
}
