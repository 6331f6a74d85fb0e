//! Finite-difference gradient oracle used by every gradient check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point);
        point[i] = orig - h;
        let down = f(&point);
        point[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective near coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coordinates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub step: f64,
    pub precision: &'static str,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares supplied analytic gradients against central differences of `f`.
pub fn compare_gradients<F>(
    names: &[String],
    inputs: &[Tensor],
    analytic: &[Tensor],
    mut f: F,
    h: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut point: Vec<Tensor> = inputs.to_vec();
    let mut entries = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let shape = input.shape().to_vec();
        let numeric = finite_diff_grad(
            |x| {
                point[k] = Tensor::new(&shape, x.to_vec()).expect("shape");
                f(&point)
            },
            input.data(),
            h,
        )?;
        point[k] = input.clone();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (a, n) in analytic[k].data().iter().zip(&numeric) {
            max_rel = max_rel.max(relative_error(*a, *n));
            max_abs = max_abs.max((a - n).abs());
        }
        entries.push(GradCheckEntry {
            name: names.get(k).cloned().unwrap_or_else(|| format!("input{k}")),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            coordinates: numeric.len(),
        });
    }
    Ok(GradCheckReport { entries, step: h, precision: "f64" })
}

/// Checks the tape gradients of `build` against finite differences.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random readout so every
/// output coordinate contributes.
pub fn grad_check<F>(build: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = (0..inputs.len()).map(|k| format!("input{k}")).collect();
    grad_check_named(build, &names, inputs, h)
}

pub fn grad_check_named<F>(build: F, names: &[String], inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut readout: Option<Tensor> = None;
    let mut eval = |point: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let w = readout
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                Tensor::randn(g.shape(out), 1.0, &mut rng)
            })
            .clone();
        let root = g.weighted_sum(out, w)?;
        let value = g.value(root).item();
        if !want_grad {
            return Ok((value, vec![]));
        }
        let grads = g.backward(root);
        let analytic = vars
            .iter()
            .zip(point)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, analytic))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut failure = None;
    let report = compare_gradients(
        names,
        inputs,
        &analytic,
        |p| match eval(p, false) {
            Ok((v, _)) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        h,
    );
    match failure {
        Some(e) => Err(e),
        None => report,
    }
}
