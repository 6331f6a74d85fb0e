//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op pushes a node holding its forward value and a closure that maps the
//! output gradient to input gradients. Ops are coarse (whole convolutions,
//! fused attention pieces, fused losses) so the tape stays short.

use crate::error::{shape_err, Result};
use crate::tensor::{gemm, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a backward closure.
pub struct Ctx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&Ctx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to the graph's leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf("input", value, false)
    }

    /// A differentiable leaf (parameter or checked input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf("leaf", value, true)
    }

    fn push_leaf(&mut self, op: &'static str, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, parents: vec![], backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First node (in creation order) whose value has a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op))
    }

    fn push(&mut self, op: &'static str, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.nodes.push(Node { op, value, parents, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `root`. Only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let root_value = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let inputs = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let ctx = Ctx { grad: &g, inputs, output: &node.value, needs };
            let parent_grads = bw(&ctx);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(
            "add",
            value,
            vec![a, b],
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]),
        ))
    }

    /// Sum of same-shaped values.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| shape_err!("add_n of nothing"))?;
        let mut acc = first;
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push("scale", value, vec![a], Box::new(move |c| vec![Some(c.grad.scale(s))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(
            "relu",
            value,
            vec![a],
            Box::new(|c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(
            "sigmoid",
            value,
            vec![a],
            Box::new(|c| vec![Some(c.grad.zip_map(c.output, |g, y| g * y * (1.0 - y)))]),
        )
    }

    /// `a * b` where `b` has the rank of `a` and each of its axes is either equal to
    /// `a`'s or 1 (broadcast).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(&map).map(|(&x, &j)| x * vb.data()[j]).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(
            "mul",
            value,
            vec![a, b],
            Box::new(move |c| {
                let (va, vb) = (c.inputs[0], c.inputs[1]);
                let ga = c.needs[0].then(|| {
                    let data = c.grad.data().iter().zip(&map).map(|(&g, &j)| g * vb.data()[j]).collect();
                    Tensor::new(va.shape(), data).expect("shape")
                });
                let gb = c.needs[1].then(|| {
                    let mut gb = Tensor::zeros(vb.shape());
                    let out = gb.data_mut();
                    for ((&g, &x), &j) in c.grad.data().iter().zip(va.data()).zip(&map) {
                        out[j] += g * x;
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            "sum_all",
            value,
            vec![a],
            Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))]),
        )
    }

    /// `sum_i weights_i * a_i` against a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        if self.shape(a) != weights.shape() {
            return Err(shape_err!("weighted_sum {:?} vs {:?}", self.shape(a), weights.shape()));
        }
        let value = Tensor::scalar(self.value(a).data().iter().zip(weights.data()).map(|(x, w)| x * w).sum());
        Ok(self.push(
            "weighted_sum",
            value,
            vec![a],
            Box::new(move |c| vec![Some(weights.scale(c.grad.item()))]),
        ))
    }

    /// Sums the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let k = *va.shape().last().ok_or_else(|| shape_err!("sum_last of a scalar"))?;
        let data = va.data().chunks(k.max(1)).map(|r| r.iter().sum()).collect();
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            "sum_last",
            value,
            vec![a],
            Box::new(move |c| {
                let mut out = Vec::with_capacity(c.inputs[0].len());
                for &g in c.grad.data() {
                    out.extend(std::iter::repeat_n(g, k));
                }
                vec![Some(Tensor::new(c.inputs[0].shape(), out).expect("shape"))]
            }),
        ))
    }

    /// Drops the trailing size-1 axis of `a`.
    pub fn squeeze_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.last() != Some(&1) {
            return Err(shape_err!("squeeze_last on {:?}", shape));
        }
        let new_shape = shape[..shape.len() - 1].to_vec();
        self.reshape(a, &new_shape)
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(
            "reshape",
            value,
            vec![a],
            Box::new(|c| vec![Some(c.grad.reshape(c.inputs[0].shape()).expect("shape"))]),
        ))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (k, &ax) in axes.iter().enumerate() {
            inverse[ax] = k;
        }
        Ok(self.push(
            "permute",
            value,
            vec![a],
            Box::new(move |c| vec![Some(c.grad.permute(&inverse).expect("perm"))]),
        ))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*vars.first().ok_or_else(|| shape_err!("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {} on rank {}", axis, first.len()));
        }
        let mut sizes = Vec::with_capacity(vars.len());
        for &v in vars {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(k, (x, y))| k != axis && x != y) {
                return Err(shape_err!("concat {:?} with {:?} on axis {}", first, s, axis));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in vars.iter().zip(&sizes) {
                let chunk = sz * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            "concat",
            value,
            vars.to_vec(),
            Box::new(move |c| {
                let g = c.grad.data();
                let mut offset = 0;
                let mut out = Vec::with_capacity(sizes.len());
                for (i, &sz) in sizes.iter().enumerate() {
                    if !c.needs[i] {
                        offset += sz * inner;
                        out.push(None);
                        continue;
                    }
                    let chunk = sz * inner;
                    let mut part = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let start = o * total * inner + offset;
                        part.extend_from_slice(&g[start..start + chunk]);
                    }
                    offset += chunk;
                    out.push(Some(Tensor::new(c.inputs[i].shape(), part).expect("shape")));
                }
                out
            }),
        ))
    }

    /// Repeats `a` along a new leading axis of size `n`.
    pub fn broadcast_batch(&mut self, a: Var, n: usize) -> Result<Var> {
        let va = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(va.shape());
        let mut data = Vec::with_capacity(n * va.len());
        for _ in 0..n {
            data.extend_from_slice(va.data());
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            "broadcast_batch",
            value,
            vec![a],
            Box::new(move |c| {
                let mut g = Tensor::zeros(c.inputs[0].shape());
                let m = g.len();
                for chunk in c.grad.data().chunks(m) {
                    for (a, b) in g.data_mut().iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    // ---------------------------------------------------------------- dense

    /// `x @ w (+ b)` applied to the last axis of `x`: `[..., cin] -> [..., cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (cin, cout) = self.value(w).dims2()?;
        let vx = self.value(x);
        if vx.shape().last() != Some(&cin) {
            return Err(shape_err!("linear input {:?} vs weight [{}, {}]", vx.shape(), cin, cout));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("linear bias {:?} vs {}", self.shape(b), cout));
            }
        }
        let rows = vx.len() / cin.max(1);
        let mut out = vec![0.0; rows * cout];
        gemm(rows, cin, cout, 1.0, vx.data(), false, self.value(w).data(), false, 0.0, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in out.chunks_mut(cout) {
                for (o, bb) in r.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            "linear",
            value,
            parents,
            Box::new(move |c| {
                let (x, w, g) = (c.inputs[0], c.inputs[1], c.grad.data());
                let gx = c.needs[0].then(|| {
                    let mut d = vec![0.0; rows * cin];
                    gemm(rows, cout, cin, 1.0, g, false, w.data(), true, 0.0, &mut d);
                    Tensor::new(x.shape(), d).expect("shape")
                });
                let gw = c.needs[1].then(|| {
                    let mut d = vec![0.0; cin * cout];
                    gemm(cin, rows, cout, 1.0, x.data(), true, g, false, 0.0, &mut d);
                    Tensor::new(&[cin, cout], d).expect("shape")
                });
                let mut out = vec![gx, gw];
                if c.inputs.len() == 3 {
                    out.push(c.needs[2].then(|| {
                        let mut d = vec![0.0; cout];
                        for r in g.chunks(cout) {
                            for (a, b) in d.iter_mut().zip(r) {
                                *a += b;
                            }
                        }
                        Tensor::new(&[cout], d).expect("shape")
                    }));
                }
                out
            }),
        ))
    }

    /// Batched matrix product `[n, m, k] @ [n, k, p]`, or `[n, m, k] @ [n, p, k]^T`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (n, m, k) = self.value(a).dims3()?;
        let (nb, b1, b2) = self.value(b).dims3()?;
        let (kb, p) = if trans_b { (b2, b1) } else { (b1, b2) };
        if nb != n || kb != k {
            return Err(shape_err!("bmm {:?} x {:?} (trans_b={})", self.shape(a), self.shape(b), trans_b));
        }
        let mut out = vec![0.0; n * m * p];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for i in 0..n {
                gemm(m, k, p, 1.0, &va[i * m * k..], false, &vb[i * k * p..], trans_b, 0.0, &mut out[i * m * p..]);
            }
        }
        let value = Tensor::new(&[n, m, p], out)?;
        Ok(self.push(
            "bmm",
            value,
            vec![a, b],
            Box::new(move |c| {
                let (va, vb, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let ga = c.needs[0].then(|| {
                    let mut d = vec![0.0; n * m * k];
                    for i in 0..n {
                        // dA = G op(B)^T
                        gemm(m, p, k, 1.0, &g[i * m * p..], false, &vb[i * k * p..], !trans_b, 0.0, &mut d[i * m * k..]);
                    }
                    Tensor::new(&[n, m, k], d).expect("shape")
                });
                let gb = c.needs[1].then(|| {
                    let mut d = vec![0.0; n * k * p];
                    for i in 0..n {
                        if trans_b {
                            // B stored [p, k]: dB = G^T A
                            gemm(p, m, k, 1.0, &g[i * m * p..], true, &va[i * m * k..], false, 0.0, &mut d[i * k * p..]);
                        } else {
                            gemm(k, m, p, 1.0, &va[i * m * k..], true, &g[i * m * p..], false, 0.0, &mut d[i * k * p..]);
                        }
                    }
                    Tensor::new(c.inputs[1].shape(), d).expect("shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let k = *va.shape().last().ok_or_else(|| shape_err!("softmax of a scalar"))?;
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(k.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(
            "softmax",
            value,
            vec![a],
            Box::new(move |c| {
                let mut d = Vec::with_capacity(c.output.len());
                for (y, g) in c.output.data().chunks(k).zip(c.grad.data().chunks(k)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    d.extend(y.iter().zip(g).map(|(y, g)| y * (g - dot)));
                }
                vec![Some(Tensor::new(c.output.shape(), d).expect("shape"))]
            }),
        ))
    }

    // ---------------------------------------------------------------- spatial

    /// 2-D convolution on NHWC input with `[k, k, cin, cout]` weights and `[cout]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (bsz, h, wd, cin) = self.value(x).dims4()?;
        let (k, k2, wcin, cout) = self.value(w).dims4()?;
        if k != k2 || wcin != cin || self.shape(b) != [cout] || stride == 0 {
            return Err(shape_err!(
                "conv2d input {:?}, weight {:?}, bias {:?}, stride {}",
                self.shape(x),
                self.shape(w),
                self.shape(b),
                stride
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err!("conv2d kernel {} larger than padded input {}x{}", k, h, wd));
        }
        let geom = ConvGeom { bsz, h, w: wd, cin, k, stride, pad, ho: (h + 2 * pad - k) / stride + 1, wo: (wd + 2 * pad - k) / stride + 1 };
        let cols = geom.im2col(self.value(x).data());
        let rows = bsz * geom.ho * geom.wo;
        let kk = k * k * cin;
        let mut out = vec![0.0; rows * cout];
        gemm(rows, kk, cout, 1.0, &cols, false, self.value(w).data(), false, 0.0, &mut out);
        let bias = self.value(b).data();
        for r in out.chunks_mut(cout) {
            for (o, bb) in r.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let value = Tensor::new(&[bsz, geom.ho, geom.wo, cout], out)?;
        Ok(self.push(
            "conv2d",
            value,
            vec![x, w, b],
            Box::new(move |c| {
                let g = c.grad.data();
                let gx = c.needs[0].then(|| {
                    let mut dcols = vec![0.0; rows * kk];
                    gemm(rows, cout, kk, 1.0, g, false, c.inputs[1].data(), true, 0.0, &mut dcols);
                    Tensor::new(c.inputs[0].shape(), geom.col2im(&dcols)).expect("shape")
                });
                let gw = c.needs[1].then(|| {
                    let mut d = vec![0.0; kk * cout];
                    gemm(kk, rows, cout, 1.0, &cols, true, g, false, 0.0, &mut d);
                    Tensor::new(c.inputs[1].shape(), d).expect("shape")
                });
                let gb = c.needs[2].then(|| {
                    let mut d = vec![0.0; cout];
                    for r in g.chunks(cout) {
                        for (a, b) in d.iter_mut().zip(r) {
                            *a += b;
                        }
                    }
                    Tensor::new(&[cout], d).expect("shape")
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Adaptive average pooling of NHWC input to an `out_h x out_w` grid.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, h, w, c) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(shape_err!("cannot pool {}x{} to {}x{}", h, w, out_h, out_w));
        }
        let ybins = adaptive_bins(h, out_h);
        let xbins = adaptive_bins(w, out_w);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * out_h * out_w * c];
        for n in 0..b {
            for (oy, &(y0, y1)) in ybins.iter().enumerate() {
                for (ox, &(x0, x1)) in xbins.iter().enumerate() {
                    let o = ((n * out_h + oy) * out_w + ox) * c;
                    let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let s = ((n * h + y) * w + xx) * c;
                            for ch in 0..c {
                                out[o + ch] += src[s + ch] * inv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, out_h, out_w, c], out)?;
        Ok(self.push(
            "adaptive_avg_pool",
            value,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; b * h * w * c];
                for n in 0..b {
                    for (oy, &(y0, y1)) in ybins.iter().enumerate() {
                        for (ox, &(x0, x1)) in xbins.iter().enumerate() {
                            let o = ((n * out_h + oy) * out_w + ox) * c;
                            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    let s = ((n * h + y) * w + xx) * c;
                                    for ch in 0..c {
                                        d[s + ch] += g[o + ch] * inv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, h, w, c], d).expect("shape"))]
            }),
        ))
    }

    /// Soft assignment of every spatial feature to Gaussian-kernel prototypes.
    ///
    /// `f`: `[b, h, w, c]`, `prototypes`: `[m, c]`, `log_sigma`: `[m]`. Output
    /// `[b, h, w, m]` holds `softmax_m(-|f - r_m|^2 / (2 sigma_m^2))` per site.
    pub fn region_masks(&mut self, f: Var, prototypes: Var, log_sigma: Var) -> Result<Var> {
        let (b, h, w, c) = self.value(f).dims4()?;
        let (m, pc) = self.value(prototypes).dims2()?;
        if pc != c {
            return Err(shape_err!("prototype channels {} vs feature channels {}", pc, c));
        }
        if self.shape(log_sigma) != [m] {
            return Err(shape_err!("smoothing factors {:?} vs {} prototypes", self.shape(log_sigma), m));
        }
        let sites = b * h * w;
        let fv = self.value(f).data();
        let pv = self.value(prototypes).data();
        let inv_var: Vec<f64> = self.value(log_sigma).data().iter().map(|r| (-2.0 * r).exp()).collect();
        let mut out = vec![0.0; sites * m];
        for s in 0..sites {
            let feat = &fv[s * c..(s + 1) * c];
            let row = &mut out[s * m..(s + 1) * m];
            for j in 0..m {
                let d2 = sq_dist(feat, &pv[j * c..(j + 1) * c]);
                row[j] = -0.5 * d2 * inv_var[j];
            }
            softmax_in_place(row);
        }
        let value = Tensor::new(&[b, h, w, m], out)?;
        Ok(self.push(
            "region_masks",
            value,
            vec![f, prototypes, log_sigma],
            Box::new(move |ctx| {
                let (fv, pv, rho) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
                let (a, g) = (ctx.output.data(), ctx.grad.data());
                let inv_var: Vec<f64> = rho.iter().map(|r| (-2.0 * r).exp()).collect();
                let mut df = vec![0.0; sites * c];
                let mut dp = vec![0.0; m * c];
                let mut drho = vec![0.0; m];
                for s in 0..sites {
                    let feat = &fv[s * c..(s + 1) * c];
                    let (ar, gr) = (&a[s * m..(s + 1) * m], &g[s * m..(s + 1) * m]);
                    let dot: f64 = ar.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..m {
                        let dl = ar[j] * (gr[j] - dot);
                        if dl == 0.0 {
                            continue;
                        }
                        let proto = &pv[j * c..(j + 1) * c];
                        let coef = dl * inv_var[j];
                        let mut d2 = 0.0;
                        for ch in 0..c {
                            let diff = feat[ch] - proto[ch];
                            d2 += diff * diff;
                            df[s * c + ch] -= coef * diff;
                            dp[j * c + ch] += coef * diff;
                        }
                        drho[j] += coef * d2;
                    }
                }
                vec![
                    ctx.needs[0].then(|| Tensor::new(ctx.inputs[0].shape(), df).expect("shape")),
                    ctx.needs[1].then(|| Tensor::new(&[m, c], dp).expect("shape")),
                    ctx.needs[2].then(|| Tensor::new(&[m], drho).expect("shape")),
                ]
            }),
        ))
    }

    // ---------------------------------------------------------------- losses

    /// Mean over rows of `-log softmax_k(cos(z_i, p_k) / tau)` at the target column.
    ///
    /// `prototypes` are constant class signatures `[k, d]`; `targets[i]` indexes them.
    pub fn cosine_cross_entropy(&mut self, z: Var, prototypes: &Tensor, targets: &[usize], tau: f64, eps: f64) -> Result<Var> {
        let (b, d) = self.value(z).dims2()?;
        let (k, pd) = prototypes.dims2()?;
        if pd != d || targets.len() != b {
            return Err(shape_err!("cosine_cross_entropy z {:?}, prototypes {:?}, {} targets", self.shape(z), prototypes.shape(), targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(shape_err!("target {} outside {} candidates", t, k));
        }
        let pn = normalize_rows(prototypes.data(), d, eps);
        let zn = normalize_rows(self.value(z).data(), d, eps);
        let mut probs = vec![0.0; b * k];
        gemm(b, d, k, 1.0 / tau, &zn, false, &pn, true, 0.0, &mut probs);
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let lse = log_sum_exp(row);
            loss += lse - row[targets[i]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        let targets = targets.to_vec();
        Ok(self.push(
            "cosine_cross_entropy",
            value,
            vec![z],
            Box::new(move |ctx| {
                let scale = ctx.grad.item() / b as f64;
                let mut dlogits = probs.clone();
                for (i, row) in dlogits.chunks_mut(k).enumerate() {
                    row[targets[i]] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale / tau;
                    }
                }
                let mut dzn = vec![0.0; b * d];
                gemm(b, k, d, 1.0, &dlogits, false, &pn, false, 0.0, &mut dzn);
                let z = ctx.inputs[0].data();
                let mut dz = vec![0.0; b * d];
                for i in 0..b {
                    let zi = &z[i * d..(i + 1) * d];
                    let norm = zi.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let gi = &dzn[i * d..(i + 1) * d];
                    if norm > eps {
                        let u = &zn[i * d..(i + 1) * d];
                        let proj: f64 = u.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dz[i * d + j] = (gi[j] - u[j] * proj) / norm;
                        }
                    } else {
                        for j in 0..d {
                            dz[i * d + j] = gi[j] / eps;
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, d], dz).expect("shape"))]
            }),
        ))
    }

    /// `(1/b) * sum_i |z_i - t_i|^2` against a constant target.
    pub fn mean_squared_rows(&mut self, z: Var, target: &Tensor) -> Result<Var> {
        let (b, _) = self.value(z).dims2()?;
        if self.shape(z) != target.shape() {
            return Err(shape_err!("mean_squared_rows {:?} vs {:?}", self.shape(z), target.shape()));
        }
        let diff = self.value(z).zip_map(target, |a, b| a - b);
        let value = Tensor::scalar(diff.data().iter().map(|x| x * x).sum::<f64>() / b as f64);
        Ok(self.push(
            "mean_squared_rows",
            value,
            vec![z],
            Box::new(move |ctx| vec![Some(diff.scale(2.0 * ctx.grad.item() / b as f64))]),
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn normalize_rows(data: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(d.max(1)) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn adaptive_bins(n: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out).map(|i| (i * n / out, ((i + 1) * n).div_ceil(out))).collect()
}

/// For each flat index of `a_shape`, the flat index of the broadcast operand.
fn broadcast_map(a_shape: &[usize], b_shape: &[usize]) -> Result<Vec<usize>> {
    if a_shape.len() != b_shape.len() || a_shape.iter().zip(b_shape).any(|(a, b)| *b != *a && *b != 1) {
        return Err(shape_err!("cannot broadcast {:?} into {:?}", b_shape, a_shape));
    }
    let rank = a_shape.len();
    let bs = strides(b_shape);
    let step: Vec<usize> = (0..rank).map(|k| if b_shape[k] == 1 { 0 } else { bs[k] }).collect();
    let n: usize = a_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut j = 0usize;
    for _ in 0..n {
        map.push(j);
        for k in (0..rank).rev() {
            idx[k] += 1;
            j += step[k];
            if idx[k] < a_shape[k] {
                break;
            }
            j -= step[k] * a_shape[k];
            idx[k] = 0;
        }
    }
    Ok(map)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    bsz: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let kk = self.k * self.k * self.cin;
        let mut cols = vec![0.0; self.bsz * self.ho * self.wo * kk];
        self.for_each_patch(|row, ky, kx, src| {
            let dst = row * kk + (ky * self.k + kx) * self.cin;
            cols[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
        });
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let kk = self.k * self.k * self.cin;
        let mut x = vec![0.0; self.bsz * self.h * self.w * self.cin];
        self.for_each_patch(|row, ky, kx, src| {
            let from = row * kk + (ky * self.k + kx) * self.cin;
            for ch in 0..self.cin {
                x[src + ch] += cols[from + ch];
            }
        });
        x
    }

    /// Calls `f(output_row, ky, kx, input_offset)` for every in-bounds tap.
    fn for_each_patch(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for n in 0..self.bsz {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (n * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((n * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(row, ky, kx, src);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn broadcast_map_spatial_and_channel() {
        let m = broadcast_map(&[1, 2, 2, 3], &[1, 2, 2, 1]).unwrap();
        assert_eq!(m, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        let m = broadcast_map(&[1, 2, 2, 3], &[1, 1, 1, 3]).unwrap();
        assert_eq!(m, vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2]);
        assert!(broadcast_map(&[2, 3], &[3, 1]).is_err());
    }

    #[test]
    fn conv2d_identity_kernel_copies_input() {
        let mut g = Graph::new();
        let x = Tensor::randn(&[1, 4, 4, 2], 1.0, &mut rng());
        let mut w = Tensor::zeros(&[3, 3, 2, 2]);
        // centre tap, channel c -> c
        w.data_mut()[(4 * 2) * 2] = 1.0;
        w.data_mut()[(4 * 2 + 1) * 2 + 1] = 1.0;
        let xv = g.input(x.clone());
        let wv = g.input(w);
        let bv = g.input(Tensor::zeros(&[2]));
        let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv2d_stride_two_halves_grid() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 8, 6, 3]));
        let w = g.input(Tensor::zeros(&[3, 3, 3, 5]));
        let b = g.input(Tensor::zeros(&[5]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 3, 5]);
    }

    #[test]
    fn adaptive_bins_cover_input() {
        assert_eq!(adaptive_bins(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(adaptive_bins(5, 2), vec![(0, 3), (2, 5)]);
        assert_eq!(adaptive_bins(3, 3), vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn gradients_of_primitive_ops() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 4, 4, 3], 1.0, &mut r);
        let w = Tensor::randn(&[3, 3, 3, 2], 0.5, &mut r);
        let b = Tensor::randn(&[2], 0.5, &mut r);
        let rep = grad_check(
            |g, v| g.conv2d(v[0], v[1], v[2], 2, 1),
            &[x.clone(), w, b],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err() < 1e-6, "{rep:?}");

        let rep = grad_check(|g, v| g.adaptive_avg_pool(v[0], 3, 2), &[x.clone()], 1e-6).unwrap();
        assert!(rep.max_rel_err() < 1e-6, "{rep:?}");

        let gate = Tensor::randn(&[2, 4, 4, 1], 1.0, &mut r);
        let rep = grad_check(|g, v| g.mul(v[0], v[1]), &[x.clone(), gate], 1e-6).unwrap();
        assert!(rep.max_rel_err() < 1e-6, "{rep:?}");

        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let bt = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
        let rep = grad_check(|g, v| g.bmm(v[0], v[1], true), &[a.clone(), bt], 1e-6).unwrap();
        assert!(rep.max_rel_err() < 1e-6, "{rep:?}");
        let bn = Tensor::randn(&[2, 4, 5], 1.0, &mut r);
        let rep = grad_check(|g, v| g.bmm(v[0], v[1], false), &[a.clone(), bn], 1e-6).unwrap();
        assert!(rep.max_rel_err() < 1e-6, "{rep:?}");

        let rep = grad_check(|g, v| g.softmax_last(v[0]), &[a.clone()], 1e-6).unwrap();
        assert!(rep.max_rel_err() < 1e-6, "{rep:?}");

        let rep = grad_check(
            |g, v| {
                let p = g.permute(v[0], &[1, 0, 2])?;
                let c = g.concat(&[p, v[1]], 1)?;
                Ok(g.sigmoid(c))
            },
            &[a.clone(), Tensor::randn(&[3, 1, 4], 1.0, &mut r)],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err() < 1e-6, "{rep:?}");
    }

    #[test]
    fn gradients_of_fused_losses() {
        let mut r = rng();
        let z = Tensor::randn(&[3, 4], 1.0, &mut r);
        let protos = Tensor::randn(&[5, 4], 1.0, &mut r);
        let rep = grad_check(
            |g, v| g.cosine_cross_entropy(v[0], &protos, &[0, 3, 4], 0.5, 1e-12),
            &[z.clone()],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err() < 1e-6, "{rep:?}");
        let target = Tensor::randn(&[3, 4], 1.0, &mut r);
        let rep = grad_check(|g, v| g.mean_squared_rows(v[0], &target), &[z], 1e-6).unwrap();
        assert!(rep.max_rel_err() < 1e-6, "{rep:?}");
    }
}
