//! Input: manifest JSON, a NUL byte, then the raw arrays back to back in
//! manifest order (images, labels, class attributes, word vectors).
#![no_main]

use libfuzzer_sys::fuzz_target;
use mgmrn::datamodel::{bundle_from_parts, Manifest};
use mgmrn::Error;

fuzz_target!(|data: &[u8]| {
    let (manifest, blobs) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    let _ = Manifest::parse(manifest);
    // Cut the tail by the declared sizes; anything undeclared reads as empty.
    let mut parts: Vec<(String, &[u8])> = Vec::new();
    if let Ok(m) = Manifest::parse(manifest) {
        let mut rest = blobs;
        for spec in [&m.images, &m.labels, &m.class_attributes, &m.attribute_word_vectors] {
            let want = spec
                .shape
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .unwrap_or(usize::MAX)
                .min(rest.len());
            let (head, tail) = rest.split_at(want);
            parts.push((spec.file.clone(), head));
            rest = tail;
        }
    }
    let _ = bundle_from_parts(manifest, |name| {
        parts
            .iter()
            .find(|(f, _)| f == name)
            .map(|(_, b)| b.to_vec())
            .ok_or_else(|| Error::Manifest(format!("missing {name}")))
    });
});
