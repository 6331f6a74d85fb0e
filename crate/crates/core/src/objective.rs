//! Training losses over per-stage attribute predictions and cosine-score
//! inference over a candidate class set.

use serde::{Deserialize, Serialize};

use crate::autograd::{normalize_rows, Graph, Var};
use crate::datamodel::AttributeSpace;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

/// Norm floor used whenever a vector is normalized for a cosine.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sce: f64,
    pub lambda_ar: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_sce: 1.0, lambda_ar: 1.0, temperature: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub sce: f64,
    pub ar: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub stages: Vec<StageLoss>,
}

/// Positions of `labels` within `seen`.
pub fn seen_targets(labels: &[usize], seen: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&c| seen.iter().position(|&s| s == c).ok_or(Error::LabelNotSeen(c)))
        .collect()
}

/// Graph nodes of the loss: the total and per-stage `(sce, ar)` scalars.
pub struct LossNodes {
    pub total: Var,
    pub stages: Vec<(Var, Var)>,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            total: g.value(self.total).item(),
            stages: self.stages.iter().map(|&(s, a)| StageLoss { sce: g.value(s).item(), ar: g.value(a).item() }).collect(),
        }
    }
}

/// Builds the summed loss over stages on the graph.
pub fn loss_on_graph(
    g: &mut Graph,
    zs: &[Var],
    attrs: &AttributeSpace,
    seen: &[usize],
    labels: &[usize],
    w: &LossWeights,
) -> Result<LossNodes> {
    if zs.is_empty() {
        return Err(shape_err!("loss needs at least one stage"));
    }
    let targets = seen_targets(labels, seen)?;
    let seen_sigs = attrs.signatures(seen);
    let true_sigs = attrs.signatures(labels);
    let mut stages = Vec::with_capacity(zs.len());
    let mut terms = Vec::with_capacity(zs.len());
    for &z in zs {
        let sce = g.cosine_cross_entropy(z, &seen_sigs, &targets, w.temperature, COSINE_EPS)?;
        let ar = g.mean_squared_rows(z, &true_sigs)?;
        let ws = g.scale(sce, w.lambda_sce);
        let wa = g.scale(ar, w.lambda_ar);
        terms.push(ws);
        terms.push(wa);
        stages.push((sce, ar));
    }
    let total = g.add_n(&terms)?;
    Ok(LossNodes { total, stages })
}

/// Cosine cross-entropy of `z: [b, d_s]` over the seen classes.
pub fn sce_loss(z: &Tensor, attrs: &AttributeSpace, seen: &[usize], labels: &[usize], temperature: f64) -> Result<f64> {
    let targets = seen_targets(labels, seen)?;
    let mut g = Graph::new();
    let zv = g.input(z.clone());
    let l = g.cosine_cross_entropy(zv, &attrs.signatures(seen), &targets, temperature, COSINE_EPS)?;
    Ok(g.value(l).item())
}

/// Batch mean of squared Euclidean distances.
pub fn ar_loss(z: &Tensor, target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let zv = g.input(z.clone());
    let l = g.mean_squared_rows(zv, target)?;
    Ok(g.value(l).item())
}

pub fn total_loss(
    zs: &[Tensor],
    attrs: &AttributeSpace,
    seen: &[usize],
    labels: &[usize],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars: Vec<Var> = zs.iter().map(|z| g.input(z.clone())).collect();
    Ok(loss_on_graph(&mut g, &vars, attrs, seen, labels, w)?.breakdown(&g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    /// `[b, classes.len()]`, summed cosines over stages.
    pub scores: Tensor,
    pub classes: Vec<usize>,
}

impl ClassScores {
    /// Argmax class per row; ties go to the smallest class id.
    pub fn predictions(&self) -> Vec<usize> {
        self.predictions_with_bias(|_| 0.0)
    }

    /// Argmax after subtracting `bias(class)` from each score.
    pub fn predictions_with_bias(&self, bias: impl Fn(usize) -> f64) -> Vec<usize> {
        let k = self.classes.len();
        let offsets: Vec<f64> = self.classes.iter().map(|&c| bias(c)).collect();
        self.scores
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for ((&s, &o), &c) in row.iter().zip(&offsets).zip(&self.classes) {
                    let v = s - o;
                    if v > best.0 || (v == best.0 && c < best.1) {
                        best = (v, c);
                    }
                }
                best.1
            })
            .collect()
    }

    /// Restriction to a subset of the candidate classes.
    pub fn restrict(&self, classes: &[usize]) -> Result<Self> {
        let cols: Vec<usize> = classes
            .iter()
            .map(|c| self.classes.iter().position(|x| x == c).ok_or_else(|| shape_err!("class {} not scored", c)))
            .collect::<Result<_>>()?;
        let k = self.classes.len();
        let data = self.scores.data().chunks(k).flat_map(|row| cols.iter().map(|&j| row[j]).collect::<Vec<_>>()).collect();
        Ok(Self { scores: Tensor::new(&[self.scores.dim(0), cols.len()], data)?, classes: classes.to_vec() })
    }
}

/// Sum over stages of `cos(z_l, signature(c))` for each candidate `c`.
pub fn class_scores(zs: &[Tensor], attrs: &AttributeSpace, candidates: &[usize]) -> Result<ClassScores> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let first = zs.first().ok_or_else(|| shape_err!("no stage predictions"))?;
    let (b, d) = first.dims2()?;
    if d != attrs.num_attributes() {
        return Err(shape_err!("predictions of width {} vs {} attributes", d, attrs.num_attributes()));
    }
    if let Some(&c) = candidates.iter().find(|&&c| c >= attrs.num_classes()) {
        return Err(shape_err!("candidate class {} outside {} classes", c, attrs.num_classes()));
    }
    let k = candidates.len();
    let sig = normalize_rows(attrs.signatures(candidates).data(), d, COSINE_EPS);
    let mut scores = vec![0.0; b * k];
    for z in zs {
        if z.shape() != first.shape() {
            return Err(shape_err!("stage predictions {:?} vs {:?}", z.shape(), first.shape()));
        }
        let zn = normalize_rows(z.data(), d, COSINE_EPS);
        gemm(b, d, k, 1.0, &zn, false, &sig, true, 1.0, &mut scores);
    }
    Ok(ClassScores { scores: Tensor::new(&[b, k], scores)?, classes: candidates.to_vec() })
}

/// Scores and argmax labels over `candidates`.
pub fn predict(zs: &[Tensor], attrs: &AttributeSpace, candidates: &[usize]) -> Result<(ClassScores, Vec<usize>)> {
    let scores = class_scores(zs, attrs, candidates)?;
    let preds = scores.predictions();
    Ok((scores, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, DEFAULT_STEP};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space(rows: &[&[f64]]) -> AttributeSpace {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.to_vec()).collect();
        AttributeSpace::new(
            Tensor::new(&[rows.len(), d], data).unwrap(),
            Tensor::eye(d),
            (0..d).map(|i| format!("a{i}")).collect(),
        )
        .unwrap()
    }

    fn random_space(k: usize, d: usize, rng: &mut ChaCha8Rng) -> AttributeSpace {
        AttributeSpace::new(Tensor::uniform(&[k, d], 0.0, 1.0, rng), Tensor::eye(d), (0..d).map(|i| format!("a{i}")).collect())
            .unwrap()
    }

    #[test]
    fn sce_closed_form() {
        let a = space(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let z = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let l = sce_loss(&z, &a, &[0, 1], &[0], 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 5e-5);
        let l5 = sce_loss(&z.scale(5.0), &a, &[0, 1], &[0], 1.0).unwrap();
        assert!((l - l5).abs() < 1e-15);
    }

    #[test]
    fn sce_single_class_is_zero_and_unseen_label_errors() {
        let a = space(&[&[1.0, 0.5], &[0.0, 1.0]]);
        let z = Tensor::new(&[2, 2], vec![0.3, -2.0, 4.0, 1.0]).unwrap();
        assert_eq!(sce_loss(&z, &a, &[1], &[1, 1], 1.0).unwrap(), 0.0);
        assert!(matches!(sce_loss(&z, &a, &[1], &[0, 1], 1.0), Err(Error::LabelNotSeen(0))));
    }

    #[test]
    fn ar_cases() {
        let t = Tensor::new(&[1, 4], vec![0.5, 0.1, 0.9, 0.0]).unwrap();
        assert_eq!(ar_loss(&t, &t).unwrap(), 0.0);
        let z = t.map(|v| v + 1.0);
        assert!((ar_loss(&z, &t).unwrap() - 4.0).abs() < 1e-12);
        let z2 = t.map(|v| v + 2.0);
        assert!((ar_loss(&z2, &t).unwrap() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_space(4, 5, &mut rng);
        let seen = [0, 2, 3];
        let labels = [2, 0, 3];
        let z = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let w = LossWeights::default();
        let one = total_loss(std::slice::from_ref(&z), &a, &seen, &labels, &w).unwrap();
        let sce = sce_loss(&z, &a, &seen, &labels, 1.0).unwrap();
        let ar = ar_loss(&z, &a.signatures(&labels)).unwrap();
        assert!((one.total - (sce + ar)).abs() < 1e-12);
        let three = total_loss(&[z.clone(), z.clone(), z.clone()], &a, &seen, &labels, &w).unwrap();
        assert!((three.total - 3.0 * one.total).abs() < 1e-12);
        let sce_only = total_loss(&[z], &a, &seen, &labels, &LossWeights { lambda_ar: 0.0, ..w }).unwrap();
        assert!((sce_only.total - sce).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_space(5, 4, &mut rng);
        let seen = vec![1, 2, 4];
        let labels = vec![4, 1];
        let w = LossWeights { lambda_sce: 0.7, lambda_ar: 1.3, temperature: 0.5 };
        let inputs = vec![Tensor::randn(&[2, 4], 1.0, &mut rng), Tensor::randn(&[2, 4], 1.0, &mut rng)];
        let rep = grad_check(|g, v| Ok(loss_on_graph(g, v, &a, &seen, &labels, &w)?.total), &inputs, DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_err() < 1e-5, "{rep:?}");
    }

    #[test]
    fn predict_exact_match() {
        let a = space(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let z = Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let (s, p) = predict(&[z], &a, &[0, 1, 2]).unwrap();
        assert_eq!(p, vec![1]);
        assert!((s.scores.data()[1] - 1.0).abs() < 1e-15);
        assert!(matches!(predict(&[Tensor::zeros(&[1, 3])], &a, &[]), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn ties_go_to_smallest_class() {
        let a = space(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let z = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(predict(&[z.clone()], &a, &[1, 0, 2]).unwrap().1, vec![0]);
        assert_eq!(predict(&[z], &a, &[2, 1]).unwrap().1, vec![1]);
    }

    fn brute_force(zs: &[Tensor], a: &AttributeSpace, cands: &[usize]) -> Vec<usize> {
        let (b, d) = zs[0].dims2().unwrap();
        (0..b)
            .map(|i| {
                let mut best = (f64::NEG_INFINITY, 0);
                for &c in cands {
                    let sig = a.signature(c);
                    let mut score = 0.0;
                    for z in zs {
                        let row = &z.data()[i * d..(i + 1) * d];
                        let dot: f64 = row.iter().zip(sig).map(|(x, y)| x * y).sum();
                        let nz = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
                        let ns = sig.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
                        score += dot / (nz * ns);
                    }
                    if score > best.0 {
                        best = (score, c);
                    }
                }
                best.1
            })
            .collect()
    }

    #[test]
    fn predict_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_space(3, 4, &mut rng);
            let zs = vec![Tensor::randn(&[6, 4], 1.0, &mut rng), Tensor::randn(&[6, 4], 1.0, &mut rng)];
            let (scores, p) = predict(&zs, &a, &[0, 1, 2]).unwrap();
            assert_eq!(p, brute_force(&zs, &a, &[0, 1, 2]));
            assert!(scores.scores.data().iter().all(|s| s.abs() <= 2.0 + 1e-12));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn argmax_invariant_to_positive_scaling(seed in any::<u64>(), s1 in 0.01f64..100.0, s2 in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_space(5, 4, &mut rng);
            let zs = vec![Tensor::randn(&[4, 4], 1.0, &mut rng), Tensor::randn(&[4, 4], 1.0, &mut rng)];
            let cands = [0, 1, 2, 3, 4];
            let base = predict(&zs, &a, &cands).unwrap().1;
            let scaled_z = vec![zs[0].scale(s1), zs[1].scale(s2)];
            prop_assert_eq!(&predict(&scaled_z, &a, &cands).unwrap().1, &base);
            let scaled_sig = AttributeSpace::new(a.class_attributes.scale(s1), a.word_vectors.clone(), a.names.clone()).unwrap();
            prop_assert_eq!(&predict(&zs, &scaled_sig, &cands).unwrap().1, &base);
        }

        #[test]
        fn sce_strictly_positive(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_space(3, 4, &mut rng);
            let z = Tensor::randn(&[2, 4], 3.0, &mut rng);
            prop_assert!(sce_loss(&z, &a, &[0, 1, 2], &[0, 2], 1.0).unwrap() > 0.0);
        }

        #[test]
        fn czsl_agrees_with_gzsl_when_unseen_wins(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_space(6, 4, &mut rng);
            let zs = vec![Tensor::randn(&[8, 4], 1.0, &mut rng)];
            let unseen = [1, 4];
            let (_, g) = predict(&zs, &a, &[0, 1, 2, 3, 4, 5]).unwrap();
            let (_, c) = predict(&zs, &a, &unseen).unwrap();
            for (gp, cp) in g.iter().zip(&c) {
                if unseen.contains(gp) {
                    prop_assert_eq!(gp, cp);
                }
            }
        }
    }
}
