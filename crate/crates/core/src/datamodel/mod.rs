//! Dataset container, class/attribute space, splits and run configuration.

mod config;
mod io;
mod synth;

use std::collections::BTreeSet;
use std::fmt;

pub use config::{ModelConfig, Variant};
pub use io::{bundle_from_parts, load_bundle, save_bundle, Manifest, ArraySpec, SplitSpec, MANIFEST_FILE};
pub use synth::{synth_generate, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class attribute signatures and one word vector per attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeSpace {
    /// `[num_classes, d_s]`
    pub class_attributes: Tensor,
    /// `[d_s, d_w2v]`
    pub word_vectors: Tensor,
    pub names: Vec<String>,
}

impl AttributeSpace {
    pub fn new(class_attributes: Tensor, word_vectors: Tensor, names: Vec<String>) -> Result<Self> {
        let (_, ds) = class_attributes.dims2()?;
        let (wds, _) = word_vectors.dims2()?;
        if ds == 0 {
            return Err(Error::Shape("attribute dimension must be at least 1".into()));
        }
        if wds != ds || names.len() != ds {
            return Err(Error::Shape(format!(
                "{} attributes in signatures, {} word vectors, {} names",
                ds,
                wds,
                names.len()
            )));
        }
        if !class_attributes.all_finite() || !word_vectors.all_finite() {
            return Err(Error::NonFinite("attribute space".into()));
        }
        Ok(Self { class_attributes, word_vectors, names })
    }

    pub fn num_classes(&self) -> usize {
        self.class_attributes.dim(0)
    }

    pub fn num_attributes(&self) -> usize {
        self.class_attributes.dim(1)
    }

    pub fn word_dim(&self) -> usize {
        self.word_vectors.dim(1)
    }

    pub fn signature(&self, class: usize) -> &[f64] {
        self.class_attributes.row(class)
    }

    /// Signatures of `classes`, stacked in the given order.
    pub fn signatures(&self, classes: &[usize]) -> Tensor {
        self.class_attributes.gather_rows(classes)
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }
}

/// Image indices of the three evaluation partitions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

/// Images are stored as `f32` in `[0, 1]`, shape `[n, h, w, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub image_shape: [usize; 4],
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub attribute_space: AttributeSpace,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub split: Split,
}

impl DatasetBundle {
    pub fn num_images(&self) -> usize {
        self.image_shape[0]
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.image_shape[1], self.image_shape[2])
    }

    pub fn channels(&self) -> usize {
        self.image_shape[3]
    }

    /// Gathers images `indices` into an `[n, h, w, c]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let per = self.image_shape[1] * self.image_shape[2] * self.image_shape[3];
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.images[i * per..(i + 1) * per].iter().map(|&v| f64::from(v)));
        }
        Tensor::new(&[indices.len(), self.image_shape[1], self.image_shape[2], self.image_shape[3]], data)
            .expect("batch shape")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.seen_classes.iter().chain(&self.unseen_classes).copied().collect();
        all.sort_unstable();
        all
    }

    pub fn stats(&self) -> BundleStats {
        BundleStats {
            semantic_dim: self.attribute_space.num_attributes(),
            classes_total: self.attribute_space.num_classes(),
            classes_seen: self.seen_classes.len(),
            classes_unseen: self.unseen_classes.len(),
            images_total: self.num_images(),
            images_train: self.split.train.len(),
            images_test_unseen: self.split.test_unseen.len(),
            images_test_seen: self.split.test_seen.len(),
        }
    }
}

/// Dataset summary in the usual benchmark-table columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct BundleStats {
    pub semantic_dim: usize,
    pub classes_total: usize,
    pub classes_seen: usize,
    pub classes_unseen: usize,
    pub images_total: usize,
    pub images_train: usize,
    pub images_test_unseen: usize,
    pub images_test_seen: usize,
}

impl fmt::Display for BundleStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "semantic dim {} | classes {} / {} / {} | images {} / {} / {} / {}",
            self.semantic_dim,
            self.classes_total,
            self.classes_seen,
            self.classes_unseen,
            self.images_total,
            self.images_train,
            self.images_test_unseen,
            self.images_test_seen
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    SplitOverlap { class: usize },
    ClassOutOfRange { class: usize },
    DuplicateClass { class: usize },
    LabelOutOfRange { index: usize, label: usize },
    IndexOutOfRange { list: &'static str, index: usize },
    IndexReused { index: usize },
    WrongPartition { list: &'static str, index: usize, label: usize },
    Shape(String),
    NonFinite(&'static str),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SplitOverlap { class } => write!(f, "split overlap: class {class} is both seen and unseen"),
            Violation::ClassOutOfRange { class } => write!(f, "class {class} is outside the attribute table"),
            Violation::DuplicateClass { class } => write!(f, "class {class} listed twice"),
            Violation::LabelOutOfRange { index, label } => write!(f, "image {index} has label {label} outside the class range"),
            Violation::IndexOutOfRange { list, index } => write!(f, "{list} index {index} is out of range"),
            Violation::IndexReused { index } => write!(f, "image {index} appears in more than one split position"),
            Violation::WrongPartition { list, index, label } => {
                write!(f, "{list} image {index} has label {label} from the wrong class partition")
            }
            Violation::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Violation::NonFinite(what) => write!(f, "non-finite values in {what}"),
        }
    }
}

/// Result of [`validate_split`]; empty iff the bundle satisfies every invariant.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitReport {
    pub violations: Vec<Violation>,
}

impl SplitReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Audits shapes, class partitions and split index lists.
pub fn validate_split(bundle: &DatasetBundle) -> SplitReport {
    let mut v = Vec::new();
    let space = &bundle.attribute_space;
    let num_classes = space.num_classes();
    let n = bundle.num_images();

    let per_image: usize = bundle.image_shape[1..].iter().product();
    if bundle.images.len() != n * per_image {
        v.push(Violation::Shape(format!(
            "image array has {} values, shape {:?} needs {}",
            bundle.images.len(),
            bundle.image_shape,
            n * per_image
        )));
    }
    if bundle.labels.len() != n {
        v.push(Violation::Shape(format!("{} labels for {} images", bundle.labels.len(), n)));
    }
    if space.word_vectors.dim(0) != space.num_attributes() || space.names.len() != space.num_attributes() {
        v.push(Violation::Shape("attribute tables disagree on d_s".into()));
    }
    if bundle.images.iter().any(|x| !x.is_finite()) {
        v.push(Violation::NonFinite("images"));
    }
    if !space.class_attributes.all_finite() {
        v.push(Violation::NonFinite("class attributes"));
    }
    if !space.word_vectors.all_finite() {
        v.push(Violation::NonFinite("attribute word vectors"));
    }

    let mut seen = BTreeSet::new();
    for &c in &bundle.seen_classes {
        if c >= num_classes {
            v.push(Violation::ClassOutOfRange { class: c });
        }
        if !seen.insert(c) {
            v.push(Violation::DuplicateClass { class: c });
        }
    }
    let mut unseen = BTreeSet::new();
    for &c in &bundle.unseen_classes {
        if c >= num_classes {
            v.push(Violation::ClassOutOfRange { class: c });
        }
        if !unseen.insert(c) {
            v.push(Violation::DuplicateClass { class: c });
        }
    }
    for &c in seen.intersection(&unseen) {
        v.push(Violation::SplitOverlap { class: c });
    }

    for (i, &label) in bundle.labels.iter().enumerate() {
        if label >= num_classes {
            v.push(Violation::LabelOutOfRange { index: i, label });
        }
    }

    let mut used = BTreeSet::new();
    let lists: [(&'static str, &Vec<usize>, &BTreeSet<usize>); 3] = [
        ("train", &bundle.split.train, &seen),
        ("test_seen", &bundle.split.test_seen, &seen),
        ("test_unseen", &bundle.split.test_unseen, &unseen),
    ];
    for (name, list, partition) in lists {
        for &i in list {
            if i >= n || i >= bundle.labels.len() {
                v.push(Violation::IndexOutOfRange { list: name, index: i });
                continue;
            }
            if !used.insert(i) {
                v.push(Violation::IndexReused { index: i });
            }
            let label = bundle.labels[i];
            if !partition.contains(&label) {
                v.push(Violation::WrongPartition { list: name, index: i, label });
            }
        }
    }
    SplitReport { violations: v }
}

/// Converts the first violation of a report into an error.
pub(crate) fn ensure_valid(bundle: &DatasetBundle) -> Result<()> {
    let report = validate_split(bundle);
    match report.violations.into_iter().next() {
        None => Ok(()),
        Some(Violation::SplitOverlap { class }) => Err(Error::SplitOverlap(class as i64)),
        Some(Violation::Shape(msg)) => Err(Error::Shape(msg)),
        Some(other) => Err(Error::Manifest(other.to_string())),
    }
}
