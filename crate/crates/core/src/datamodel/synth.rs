//! Seeded generator of attribute-grounded toy images.
//!
//! Every attribute owns a cell of a square layout grid and its own hue, evenly
//! spaced around the colour wheel. Even attributes render as solid patches,
//! odd attributes as a one-pixel checker pattern, so some attributes need
//! coarse and some fine spatial detail. An
//! image of class `c` draws each attribute with opacity tied to the class
//! signature, plus per-image jitter, occasional occlusion and pixel noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ensure_valid, AttributeSpace, DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHANNELS: usize = 3;
const MAX_SIGNATURE_RETRIES: usize = 1000;
const TEST_FRACTION: f64 = 0.2;
const PIXEL_NOISE: f64 = 0.04;
const STRENGTH_NOISE: f64 = 0.1;
const OCCLUSION_PROB: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_seen: usize,
    pub d_s: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default = "default_word_dim")]
    pub word_dim: usize,
}

fn default_word_dim() -> usize {
    32
}

impl SynthSpec {
    /// 20 classes (16 seen), 16 attributes, 80 16x16 images per class.
    pub fn reference(seed: u64) -> Self {
        Self { num_classes: 20, num_seen: 16, d_s: 16, images_per_class: 80, image_size: 16, seed, word_dim: 32 }
    }

    fn validate(&self) -> Result<()> {
        if self.num_seen >= self.num_classes {
            return Err(Error::Config("need at least one unseen class".into()));
        }
        if self.num_seen == 0 {
            return Err(Error::Config("need at least one seen class".into()));
        }
        if self.d_s < 2 {
            return Err(Error::Config("need at least two attributes".into()));
        }
        if self.images_per_class == 0 || self.word_dim == 0 {
            return Err(Error::Config("images per class and word dimension must be positive".into()));
        }
        if self.image_size / layout_side(self.d_s) < 2 {
            return Err(Error::Config(format!(
                "image size {} is too small for {} attribute cells",
                self.image_size, self.d_s
            )));
        }
        if u64::try_from(self.num_classes * self.images_per_class).map_or(true, |n| n > i32::MAX as u64) {
            return Err(Error::Config("too many images".into()));
        }
        Ok(())
    }
}

/// Fully saturated colour for `hue` in `[0, 1)`.
fn hue_to_rgb(hue: f64) -> [f64; 3] {
    let h = hue * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn layout_side(d_s: usize) -> usize {
    (1..).find(|g| g * g >= d_s).unwrap()
}

/// Deterministic in `spec`: equal specs give equal bundles, bit for bit.
pub fn synth_generate(spec: &SynthSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, ds) = (spec.num_classes, spec.d_s);

    let bits = distinct_signatures(k, ds, &mut rng)?;
    let attrs: Vec<f64> = bits
        .iter()
        .map(|&on| {
            let v: f32 = if on { rng.random_range(0.7..1.0) } else { rng.random_range(0.0..0.15) };
            f64::from(v)
        })
        .collect();

    let words: Vec<f64> = {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut out = Vec::with_capacity(ds * spec.word_dim);
        for _ in 0..ds {
            let v: Vec<f64> = (0..spec.word_dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            out.extend(v.iter().map(|x| f64::from((x / norm) as f32)));
        }
        out
    };

    let hues = ds;
    let colours: Vec<[f64; 3]> = (0..ds)
        .map(|i| {
            let hue = (i as f64 + rng.random_range(-0.1..0.1)) / hues as f64;
            hue_to_rgb(hue.rem_euclid(1.0))
        })
        .collect();
    let names: Vec<String> = (0..ds)
        .map(|i| format!("attr{:02}_{}", i, if i % 2 == 0 { "solid" } else { "checker" }))
        .collect();

    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(&mut rng);
    let mut seen_classes = classes[..spec.num_seen].to_vec();
    let mut unseen_classes = classes[spec.num_seen..].to_vec();
    seen_classes.sort_unstable();
    unseen_classes.sort_unstable();

    let s = spec.image_size;
    let side = layout_side(ds);
    let cell = s / side;
    let per_image = s * s * CHANNELS;
    let n = k * spec.images_per_class;
    let mut images = Vec::with_capacity(n * per_image);
    let mut labels = Vec::with_capacity(n);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for c in 0..k {
        let signature = &attrs[c * ds..(c + 1) * ds];
        for _ in 0..spec.images_per_class {
            let mut img = vec![0.0f64; per_image];
            let background = rng.random_range(0.05..0.2);
            let gain = rng.random_range(0.85..1.15);
            let shift_y = rng.random_range(0..cell.min(2)) as isize;
            let shift_x = rng.random_range(0..cell.min(2)) as isize;
            img.iter_mut().for_each(|p| *p = background);
            for (i, &strength) in signature.iter().enumerate() {
                let occluded = rng.random_bool(OCCLUSION_PROB);
                let noisy = (strength + STRENGTH_NOISE * normal.sample(&mut rng)).clamp(0.0, 1.0);
                let alpha = if occluded { 0.0 } else { (noisy * gain).min(1.0) };
                let (cy, cx) = ((i / side) * cell, (i % side) * cell);
                let patch = cell - 1;
                for dy in 0..patch {
                    for dx in 0..patch {
                        if i % 2 == 1 && (dy + dx) % 2 == 1 {
                            continue;
                        }
                        let y = (cy + dy) as isize + shift_y;
                        let x = (cx + dx) as isize + shift_x;
                        if y < 0 || x < 0 || y >= s as isize || x >= s as isize {
                            continue;
                        }
                        let base = (y as usize * s + x as usize) * CHANNELS;
                        for ch in 0..CHANNELS {
                            let p = &mut img[base + ch];
                            *p = *p * (1.0 - alpha) + colours[i][ch] * alpha;
                        }
                    }
                }
            }
            images.extend(
                img.iter().map(|&p| (p + PIXEL_NOISE * normal.sample(&mut rng)).clamp(0.0, 1.0) as f32),
            );
            labels.push(c);
        }
    }

    let per = spec.images_per_class;
    let n_test = if per >= 2 { ((per as f64 * TEST_FRACTION).round() as usize).clamp(1, per - 1) } else { 0 };
    let mut split = Split::default();
    for c in 0..k {
        let mut idx: Vec<usize> = (c * per..(c + 1) * per).collect();
        if unseen_classes.binary_search(&c).is_ok() {
            split.test_unseen.extend(idx);
        } else {
            idx.shuffle(&mut rng);
            let (test, train) = idx.split_at(n_test);
            let (mut test, mut train) = (test.to_vec(), train.to_vec());
            test.sort_unstable();
            train.sort_unstable();
            split.test_seen.extend(test);
            split.train.extend(train);
        }
    }

    let bundle = DatasetBundle {
        image_shape: [n, s, s, CHANNELS],
        images,
        labels,
        attribute_space: AttributeSpace::new(
            Tensor::new(&[k, ds], attrs)?,
            Tensor::new(&[ds, spec.word_dim], words)?,
            names,
        )?,
        seen_classes,
        unseen_classes,
        split,
    };
    ensure_valid(&bundle)?;
    Ok(bundle)
}

/// Bernoulli(1/2) attribute patterns with pairwise-distinct rows and at least two
/// active attributes per class.
/// Draws `k` binary signatures, each with at least two active attributes.
/// Rows are drawn greedily and kept only if they differ from every earlier
/// row in at least `3 * ds / 8` positions; the separation is relaxed step by step
/// when that cannot be met, down to plain distinctness.
fn distinct_signatures(k: usize, ds: usize, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let active = 2.min(ds);
    for separation in (1..=(ds * 3 / 8).max(1)).rev() {
        let mut bits: Vec<bool> = Vec::with_capacity(k * ds);
        'rows: for _ in 0..k {
            for _ in 0..MAX_SIGNATURE_RETRIES {
                let row: Vec<bool> = (0..ds).map(|_| rng.random_bool(0.5)).collect();
                if row.iter().filter(|&&b| b).count() < active {
                    continue;
                }
                let far = bits.chunks(ds).all(|prev| prev.iter().zip(&row).filter(|(a, b)| a != b).count() >= separation);
                if far {
                    bits.extend(row);
                    continue 'rows;
                }
            }
            break;
        }
        if bits.len() == k * ds {
            return Ok(bits);
        }
    }
    Err(Error::Synthesis(format!(
        "could not draw {k} distinct signatures over {ds} attributes in {MAX_SIGNATURE_RETRIES} attempts per class"
    )))
}
