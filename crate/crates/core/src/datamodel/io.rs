//! On-disk dataset layout: `manifest.json` plus one raw little-endian array per file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ensure_valid, AttributeSpace, DatasetBundle, Split};
use crate::binio::{check_file_name, checked_numel, decode_f32, decode_i32, encode_f32, encode_i32};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "mgmrn-dataset";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    pub d_s: usize,
    pub d_w2v: usize,
    pub images: ArraySpec,
    pub labels: ArraySpec,
    pub class_attributes: ArraySpec,
    pub attribute_word_vectors: ArraySpec,
    pub attribute_names: Vec<String>,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub split: SplitSpec,
}

impl Manifest {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(bytes)?;
        if m.format != FORMAT {
            return Err(Error::Manifest(format!("unknown format {:?}", m.format)));
        }
        if m.version != VERSION {
            return Err(Error::Manifest(format!("unsupported version {}", m.version)));
        }
        for spec in [&m.images, &m.class_attributes, &m.attribute_word_vectors] {
            expect_dtype(spec, "float32")?;
        }
        expect_dtype(&m.labels, "int32")?;
        for spec in [&m.images, &m.labels, &m.class_attributes, &m.attribute_word_vectors] {
            check_file_name(&spec.file)?;
            checked_numel(&spec.shape)?;
        }
        if m.images.shape.len() != 4 {
            return Err(Error::Shape(format!("images must be rank 4, got {:?}", m.images.shape)));
        }
        if m.labels.shape.len() != 1 || m.labels.shape[0] != m.images.shape[0] {
            return Err(Error::Shape(format!(
                "labels shape {:?} does not match {} images",
                m.labels.shape, m.images.shape[0]
            )));
        }
        if m.class_attributes.shape != [m.num_classes, m.d_s] {
            return Err(Error::Shape(format!(
                "class attributes {:?}, expected [{}, {}]",
                m.class_attributes.shape, m.num_classes, m.d_s
            )));
        }
        if m.attribute_word_vectors.shape != [m.d_s, m.d_w2v] {
            return Err(Error::Shape(format!(
                "word vectors {:?}, expected [{}, {}]",
                m.attribute_word_vectors.shape, m.d_s, m.d_w2v
            )));
        }
        if m.attribute_names.len() != m.d_s {
            return Err(Error::Shape(format!("{} attribute names for d_s = {}", m.attribute_names.len(), m.d_s)));
        }
        if let Some(&c) = m.seen_classes.iter().find(|c| m.unseen_classes.contains(c)) {
            return Err(Error::SplitOverlap(c as i64));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }
}

fn expect_dtype(spec: &ArraySpec, dtype: &str) -> Result<()> {
    if spec.dtype == dtype {
        Ok(())
    } else {
        Err(Error::Manifest(format!("{} must be {}, got {}", spec.file, dtype, spec.dtype)))
    }
}

fn read_array(spec: &ArraySpec, read: &mut dyn FnMut(&str) -> Result<Vec<u8>>) -> Result<Vec<u8>> {
    let bytes = read(&spec.file)?;
    let expected = checked_numel(&spec.shape)?
        .checked_mul(4)
        .ok_or_else(|| Error::Shape(format!("{} is too large", spec.file)))?;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, shape {:?} needs {}",
            spec.file,
            bytes.len(),
            spec.shape,
            expected
        )));
    }
    Ok(bytes)
}

/// Builds a validated bundle from manifest bytes and a reader for the named arrays.
pub fn bundle_from_parts(manifest: &[u8], mut read: impl FnMut(&str) -> Result<Vec<u8>>) -> Result<DatasetBundle> {
    let m = Manifest::parse(manifest)?;
    let images = decode_f32(&read_array(&m.images, &mut read)?)?;
    let labels = decode_i32(&read_array(&m.labels, &mut read)?)?
        .into_iter()
        .map(|l| usize::try_from(l).map_err(|_| Error::Manifest(format!("negative label {l}"))))
        .collect::<Result<Vec<_>>>()?;
    let attrs = decode_f32(&read_array(&m.class_attributes, &mut read)?)?;
    let words = decode_f32(&read_array(&m.attribute_word_vectors, &mut read)?)?;
    let space = AttributeSpace::new(
        Tensor::new(&m.class_attributes.shape, attrs.into_iter().map(f64::from).collect())?,
        Tensor::new(&m.attribute_word_vectors.shape, words.into_iter().map(f64::from).collect())?,
        m.attribute_names,
    )?;
    let s = &m.images.shape;
    let bundle = DatasetBundle {
        image_shape: [s[0], s[1], s[2], s[3]],
        images,
        labels,
        attribute_space: space,
        seen_classes: m.seen_classes,
        unseen_classes: m.unseen_classes,
        split: Split { train: m.split.train, test_seen: m.split.test_seen, test_unseen: m.split.test_unseen },
    };
    ensure_valid(&bundle)?;
    Ok(bundle)
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    bundle_from_parts(&manifest, |name| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    })
}

pub(crate) fn manifest_for(bundle: &DatasetBundle) -> Manifest {
    let space = &bundle.attribute_space;
    let spec = |file: &str, dtype: &str, shape: Vec<usize>| ArraySpec { file: file.into(), dtype: dtype.into(), shape };
    Manifest {
        format: FORMAT.into(),
        version: VERSION,
        num_classes: space.num_classes(),
        d_s: space.num_attributes(),
        d_w2v: space.word_dim(),
        images: spec("images.bin", "float32", bundle.image_shape.to_vec()),
        labels: spec("labels.bin", "int32", vec![bundle.labels.len()]),
        class_attributes: spec("class_attributes.bin", "float32", space.class_attributes.shape().to_vec()),
        attribute_word_vectors: spec("attribute_word_vectors.bin", "float32", space.word_vectors.shape().to_vec()),
        attribute_names: space.names.clone(),
        seen_classes: bundle.seen_classes.clone(),
        unseen_classes: bundle.unseen_classes.clone(),
        split: SplitSpec {
            train: bundle.split.train.clone(),
            test_seen: bundle.split.test_seen.clone(),
            test_unseen: bundle.split.test_unseen.clone(),
        },
    }
}

/// Writes the bundle; floating-point tables are stored as `f32`.
pub fn save_bundle(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = manifest_for(bundle);
    let space = &bundle.attribute_space;
    let labels = bundle
        .labels
        .iter()
        .map(|&l| i32::try_from(l).map_err(|_| Error::Shape(format!("label {l} does not fit int32"))))
        .collect::<Result<Vec<_>>>()?;
    let files: [(&str, Vec<u8>); 5] = [
        (&m.images.file, encode_f32(bundle.images.iter().copied())),
        (&m.labels.file, encode_i32(labels)),
        (&m.class_attributes.file, encode_f32(space.class_attributes.data().iter().map(|&v| v as f32))),
        (&m.attribute_word_vectors.file, encode_f32(space.word_vectors.data().iter().map(|&v| v as f32))),
        (MANIFEST_FILE, m.to_json()?),
    ];
    for (name, bytes) in files {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::tests::tiny_bundle;
    use std::collections::HashMap;

    fn parts(bundle: &DatasetBundle) -> (Vec<u8>, HashMap<String, Vec<u8>>) {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(bundle, dir.path()).unwrap();
        let mut files = HashMap::new();
        for e in fs::read_dir(dir.path()).unwrap() {
            let e = e.unwrap();
            files.insert(e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap());
        }
        (files.remove(MANIFEST_FILE).unwrap(), files)
    }

    fn rebuild(manifest: &[u8], files: &HashMap<String, Vec<u8>>) -> Result<DatasetBundle> {
        bundle_from_parts(manifest, |n| files.get(n).cloned().ok_or_else(|| Error::MissingFile(n.into())))
    }

    #[test]
    fn save_then_load_round_trips() {
        let b = tiny_bundle();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.seen_classes.len(), 3);
        assert_eq!(back.unseen_classes.len(), 1);
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let (manifest, files) = parts(&tiny_bundle());
        let mut m: serde_json::Value = serde_json::from_slice(&manifest).unwrap();
        m["unseen_classes"] = serde_json::json!([2, 3]);
        let err = rebuild(&serde_json::to_vec(&m).unwrap(), &files).unwrap_err();
        assert!(matches!(err, Error::SplitOverlap(2)), "{err}");
        assert!(err.to_string().contains("split overlap"));
    }

    #[test]
    fn wrong_image_row_count_is_rejected() {
        let (manifest, files) = parts(&tiny_bundle());
        let mut m: serde_json::Value = serde_json::from_slice(&manifest).unwrap();
        m["images"]["shape"] = serde_json::json!([7, 2, 2, 3]);
        let err = rebuild(&serde_json::to_vec(&m).unwrap(), &files).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn truncated_array_is_rejected() {
        let (manifest, mut files) = parts(&tiny_bundle());
        files.get_mut("labels.bin").unwrap().pop();
        assert!(matches!(rebuild(&manifest, &files), Err(Error::Shape(_))));
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&tiny_bundle(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("labels.bin")).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::MissingFile(_))));
        assert!(matches!(load_bundle(dir.path().join("nope")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn path_escape_is_rejected() {
        let (manifest, files) = parts(&tiny_bundle());
        let mut m: serde_json::Value = serde_json::from_slice(&manifest).unwrap();
        m["labels"]["file"] = serde_json::json!("../labels.bin");
        assert!(matches!(rebuild(&serde_json::to_vec(&m).unwrap(), &files), Err(Error::Manifest(_))));
    }
}
