//! Float32 array files with JSON sidecars, for features, region masks and
//! attention maps consumed by external plotting tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{check_file_name, checked_numel, decode_f32, encode_f32};
use crate::datamodel::DatasetBundle;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const ARRAY_FORMAT: &str = "mgmrn-array";
const ARRAY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySidecar {
    pub format: String,
    pub version: u32,
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// What the array holds, e.g. `semantic`, `visual`, `masks`, `attention`.
    pub kind: String,
    /// Class label per row.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<usize>,
    /// Split tag per row.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub splits: Vec<String>,
    /// Dataset image index per row.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
}

impl ArraySidecar {
    pub fn new(file: impl Into<String>, kind: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            format: ARRAY_FORMAT.into(),
            version: ARRAY_VERSION,
            file: file.into(),
            dtype: "float32".into(),
            shape: shape.to_vec(),
            kind: kind.into(),
            labels: Vec::new(),
            splits: Vec::new(),
            items: Vec::new(),
            attributes: Vec::new(),
            stage: None,
        }
    }

    /// Parses and validates a sidecar.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let s: Self = serde_json::from_slice(bytes).map_err(|e| Error::Export(format!("sidecar: {e}")))?;
        if s.format != ARRAY_FORMAT || s.version != ARRAY_VERSION || s.dtype != "float32" {
            return Err(Error::Export(format!("unsupported array {:?} v{} ({})", s.format, s.version, s.dtype)));
        }
        check_file_name(&s.file)?;
        let n = checked_numel(&s.shape)?;
        let rows = s.shape.first().copied().unwrap_or(0);
        for (what, len) in [("labels", s.labels.len()), ("splits", s.splits.len()), ("items", s.items.len())] {
            if len != 0 && len != rows {
                return Err(Error::Export(format!("{len} {what} for {rows} rows")));
            }
        }
        n.checked_mul(4).ok_or_else(|| Error::Export("array too large".into()))?;
        Ok(s)
    }

    pub fn num_values(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Writes `<stem>.bin` and `<stem>.json` under `dir`.
pub fn write_array(dir: impl AsRef<Path>, stem: &str, values: &[f32], mut sidecar: ArraySidecar) -> Result<ArraySidecar> {
    let dir = dir.as_ref();
    let bin = format!("{stem}.bin");
    check_file_name(&bin)?;
    if checked_numel(&sidecar.shape)? != values.len() {
        return Err(Error::Export(format!("{} values for shape {:?}", values.len(), sidecar.shape)));
    }
    sidecar.file = bin.clone();
    let json = serde_json::to_vec_pretty(&sidecar)?;
    ArraySidecar::parse(&json)?;
    std::fs::write(dir.join(&bin), encode_f32(values.iter().copied())).map_err(|e| Error::io(dir.join(&bin), e))?;
    let side = dir.join(format!("{stem}.json"));
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(sidecar)
}

pub fn write_tensor(dir: impl AsRef<Path>, stem: &str, t: &Tensor, sidecar: ArraySidecar) -> Result<ArraySidecar> {
    let values: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
    write_array(dir, stem, &values, ArraySidecar { shape: t.shape().to_vec(), ..sidecar })
}

/// Reads back an array written by [`write_array`].
pub fn read_array(dir: impl AsRef<Path>, stem: &str) -> Result<(ArraySidecar, Vec<f32>)> {
    let dir = dir.as_ref();
    let side = dir.join(format!("{stem}.json"));
    let sidecar = ArraySidecar::parse(&std::fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    let bin = dir.join(&sidecar.file);
    let values = decode_f32(&std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?)?;
    if values.len() != sidecar.num_values() {
        return Err(Error::Export(format!("{} holds {} values, sidecar says {:?}", sidecar.file, values.len(), sidecar.shape)));
    }
    Ok((sidecar, values))
}

const MAPS_FORMAT: &str = "mgmrn-maps";

/// One fused attention map of one image for one attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapEntry {
    pub file: String,
    pub item: usize,
    pub label: usize,
    pub attribute: String,
    pub attribute_index: usize,
}

/// Index of the attention map files written by a visualization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapsSidecar {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    /// `[height, width]` of every map.
    pub shape: [usize; 2],
    pub maps: Vec<MapEntry>,
}

impl MapsSidecar {
    pub fn new(shape: [usize; 2]) -> Self {
        Self { format: MAPS_FORMAT.into(), version: ARRAY_VERSION, dtype: "float32".into(), shape, maps: Vec::new() }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let s: Self = serde_json::from_slice(bytes).map_err(|e| Error::Export(format!("maps sidecar: {e}")))?;
        if s.format != MAPS_FORMAT || s.version != ARRAY_VERSION || s.dtype != "float32" {
            return Err(Error::Export(format!("unsupported maps index {:?} v{} ({})", s.format, s.version, s.dtype)));
        }
        checked_numel(&s.shape)?;
        for m in &s.maps {
            check_file_name(&m.file)?;
        }
        Ok(s)
    }

    /// Writes one `[h, w]` map and records it.
    pub fn push_map(&mut self, dir: impl AsRef<Path>, entry: MapEntry, values: &[f64]) -> Result<()> {
        check_file_name(&entry.file)?;
        if values.len() != self.shape[0] * self.shape[1] {
            return Err(Error::Export(format!("{} values for a {:?} map", values.len(), self.shape)));
        }
        let path = dir.as_ref().join(&entry.file);
        std::fs::write(&path, encode_f32(values.iter().map(|&v| v as f32))).map_err(|e| Error::io(&path, e))?;
        self.maps.push(entry);
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Stage-averaged attribute predictions.
    Semantic,
    /// Unified visual features averaged over sites and stages.
    Visual,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Semantic => "semantic",
            FeatureKind::Visual => "visual",
        }
    }
}

/// Exports one row per test item (seen split first), tagged with label and split.
pub fn export_features(
    model: &Model,
    store: &ParamStore,
    bundle: &DatasetBundle,
    kind: FeatureKind,
    batch: usize,
    dir: impl AsRef<Path>,
) -> Result<ArraySidecar> {
    let mut items = Vec::new();
    let mut splits = Vec::new();
    for (tag, idx) in [("test_seen", &bundle.split.test_seen), ("test_unseen", &bundle.split.test_unseen)] {
        items.extend_from_slice(idx);
        splits.extend(std::iter::repeat_n(tag.to_string(), idx.len()));
    }
    let mut rows: Vec<f32> = Vec::new();
    let mut width = 0;
    for chunk in items.chunks(batch.max(1)) {
        let out = model.infer(store, &bundle.batch(chunk), &bundle.attribute_space.word_vectors)?;
        let parts: &[Tensor] = match kind {
            FeatureKind::Semantic => &out.zs,
            FeatureKind::Visual => &out.unified,
        };
        let n = chunk.len();
        let d = *parts[0].shape().last().expect("rank >= 2");
        width = d;
        let per_item = parts[0].len() / n;
        let sites = (per_item / d) as f64;
        let mut acc = vec![0.0f64; n * d];
        for t in parts {
            for (i, item) in t.data().chunks(per_item).enumerate() {
                for site in item.chunks(d) {
                    for (a, v) in acc[i * d..(i + 1) * d].iter_mut().zip(site) {
                        *a += v / (sites * parts.len() as f64);
                    }
                }
            }
        }
        rows.extend(acc.iter().map(|&v| v as f32));
    }
    let mut sidecar = ArraySidecar::new("", kind.name(), &[items.len(), width]);
    sidecar.labels = bundle.labels_of(&items);
    sidecar.splits = splits;
    sidecar.items = items;
    if kind == FeatureKind::Semantic {
        sidecar.attributes = bundle.attribute_space.names.clone();
    }
    write_array(dir, &format!("features_{}", kind.name()), &rows, sidecar)
}
