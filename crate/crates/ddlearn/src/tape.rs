//! Reverse-mode autodiff over a recorded computation trace.
//!
//! Each forward op appends a node holding its value and the indices of its
//! inputs; [`Tape::backward`] replays the trace in reverse, accumulating
//! exact gradients. Gradient accumulation is additive: repeated backward
//! calls without [`Tape::zero_grads`] sum their contributions, matching the
//! usual training-loop semantics.
//!
//! Layers keep their parameters outside the tape in [`Parameter`] values; a
//! training step copies parameter values in as leaves and copies gradients
//! back out after backward.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// A named trainable tensor with an accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Add `g` into the stored gradient.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::dim(
                "Parameter::accumulate",
                format!("gradient shape {:?} != value shape {:?}", g.shape(), self.value.shape()),
            ));
        }
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }
}

const LOG_FLOOR: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Conv2d { input: usize, kernel: usize, bias: usize },
    Relu { input: usize },
    MaxPool2d { input: usize, argmax: Vec<usize> },
    Fc { input: usize, weight: usize, bias: usize },
    Softmax { input: usize },
    CrossEntropy { probs: usize, labels: Vec<usize> },
    MatmulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Neg { input: usize },
    Scale { input: usize, factor: f64 },
    Offset { input: usize },
    MulMask { input: usize, mask: Tensor },
    Exp { input: usize },
    Ln { input: usize },
    SumAll { input: usize },
    MeanAll { input: usize },
    RowSum { input: usize },
    L2NormalizeRows { input: usize, norms: Vec<f64> },
    PairwiseSqDist { a: usize, b: usize },
    KlGaussian { a: usize, b: usize, var_floor: f64 },
    Reshape { input: usize },
    SliceRows { input: usize, start: usize },
    Detach,
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Recorded computation trace.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ran_backward: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.data().iter().all(|v| v.is_finite()), "non-finite op output");
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input or constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Insert a parameter's current value as a leaf.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.leaf(p.value.clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v` from previous backward passes.
    pub fn grad(&self, v: Var) -> Result<&Tensor> {
        if !self.ran_backward {
            return Err(Error::State("gradient requested before any backward pass".into()));
        }
        self.nodes[v.0]
            .grad
            .as_ref()
            .ok_or_else(|| Error::Internal("backward left a node without a gradient".into()))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.ran_backward = false;
    }

    // ── forward ops ─────────────────────────────────────────────────

    /// Valid cross-correlation over `[b, c, 1, w]` with an `[co, c, 1, k]`
    /// kernel, stride 1, no padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.nodes[input.0].value.shape().to_vec();
        let ks = self.nodes[kernel.0].value.shape().to_vec();
        let bs = self.nodes[bias.0].value.shape().to_vec();
        if xs.len() != 4 || xs[2] != 1 {
            return Err(Error::dim("conv2d", format!("input must be [b, c, 1, w], got {xs:?}")));
        }
        if ks.len() != 4 || ks[2] != 1 {
            return Err(Error::dim("conv2d", format!("kernel must be [co, c, 1, k], got {ks:?}")));
        }
        let (b, c, w) = (xs[0], xs[1], xs[3]);
        let (co, ck, k) = (ks[0], ks[1], ks[3]);
        if ck != c {
            return Err(Error::dim(
                "conv2d",
                format!("kernel in-channel axis (1): expected {c}, got {ck}"),
            ));
        }
        if k > w {
            return Err(Error::dim(
                "conv2d",
                format!("kernel width axis (3): kernel {k} exceeds input width {w}"),
            ));
        }
        if bs != [co] {
            return Err(Error::dim("conv2d", format!("bias axis (0): expected [{co}], got {bs:?}")));
        }
        let ow = w - k + 1;
        let x = self.nodes[input.0].value.data();
        let kd = self.nodes[kernel.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let mut out = vec![0.0; b * co * ow];
        for n in 0..b {
            for o in 0..co {
                for t in 0..ow {
                    let mut s = bd[o];
                    for ch in 0..c {
                        let xoff = (n * c + ch) * w + t;
                        let koff = (o * c + ch) * k;
                        for dk in 0..k {
                            s += x[xoff + dk] * kd[koff + dk];
                        }
                    }
                    out[(n * co + o) * ow + t] = s;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, co, 1, ow], out),
            Op::Conv2d { input: input.0, kernel: kernel.0, bias: bias.0 },
        ))
    }

    /// Elementwise max(x, 0).
    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.nodes[input.0].value.map(|v| v.max(0.0));
        self.push(out, Op::Relu { input: input.0 })
    }

    /// Max over disjoint `(1, 2)` windows with stride 2 along the time
    /// axis; a trailing odd element is dropped.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let xs = self.nodes[input.0].value.shape().to_vec();
        if xs.len() != 4 || xs[2] != 1 {
            return Err(Error::dim("maxpool2d", format!("input must be [b, c, 1, w], got {xs:?}")));
        }
        let (b, c, w) = (xs[0], xs[1], xs[3]);
        if w < 2 {
            return Err(Error::dim("maxpool2d", format!("time axis (3): width {w} < 2")));
        }
        let ow = w / 2;
        let x = self.nodes[input.0].value.data();
        let mut out = vec![0.0; b * c * ow];
        let mut argmax = vec![0usize; b * c * ow];
        for n in 0..b {
            for ch in 0..c {
                let row = (n * c + ch) * w;
                for t in 0..ow {
                    let i0 = row + 2 * t;
                    let (v, a) = if x[i0] >= x[i0 + 1] { (x[i0], i0) } else { (x[i0 + 1], i0 + 1) };
                    out[(n * c + ch) * ow + t] = v;
                    argmax[(n * c + ch) * ow + t] = a;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c, 1, ow], out),
            Op::MaxPool2d { input: input.0, argmax },
        ))
    }

    /// Affine map `x · Wᵀ + bias` for `x: [b, n]`, `W: [m, n]`, `bias: [m]`.
    pub fn fc(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.nodes[input.0].value.shape().to_vec();
        let ws = self.nodes[weight.0].value.shape().to_vec();
        let bs = self.nodes[bias.0].value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::dim("fc", format!("expected 2-D x and weight, got {xs:?} and {ws:?}")));
        }
        let (b, n) = (xs[0], xs[1]);
        let (m, wn) = (ws[0], ws[1]);
        if wn != n {
            return Err(Error::dim("fc", format!("inner axis: x has {n}, weight has {wn}")));
        }
        if bs != [m] {
            return Err(Error::dim("fc", format!("bias axis (0): expected [{m}], got {bs:?}")));
        }
        let x = self.nodes[input.0].value.data();
        let wd = self.nodes[weight.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let mut out = vec![0.0; b * m];
        for i in 0..b {
            for j in 0..m {
                let mut s = bd[j];
                for k in 0..n {
                    s += x[i * n + k] * wd[j * n + k];
                }
                out[i * m + j] = s;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, m], out),
            Op::Fc { input: input.0, weight: weight.0, bias: bias.0 },
        ))
    }

    /// Row-wise softmax with max-shift stabilization.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let xs = self.nodes[input.0].value.shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::dim("softmax", format!("expected [b, k] logits, got {xs:?}")));
        }
        let (b, k) = (xs[0], xs[1]);
        let x = self.nodes[input.0].value.data();
        let mut out = vec![0.0; b * k];
        for i in 0..b {
            let row = &x[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                out[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                out[i * k + j] /= z;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![b, k], out), Op::Softmax { input: input.0 }))
    }

    /// Mean over the batch of `−ln p[label]`, with the log clamped at a
    /// 1e-12 floor. Rows must already sum to 1 within 1e-9.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let ps = self.nodes[probs.0].value.shape().to_vec();
        if ps.len() != 2 {
            return Err(Error::dim("cross_entropy", format!("expected [b, k] probs, got {ps:?}")));
        }
        let (b, k) = (ps[0], ps[1]);
        if labels.len() != b {
            return Err(Error::dim(
                "cross_entropy",
                format!("batch axis (0): {b} rows vs {} labels", labels.len()),
            ));
        }
        let p = self.nodes[probs.0].value.data();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Input(format!("label {y} out of range [0, {k}) at row {i}")));
            }
            let row_sum: f64 = p[i * k..(i + 1) * k].iter().sum();
            if (row_sum - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!(
                    "probability row {i} sums to {row_sum}, expected 1 within 1e-9"
                )));
            }
            total -= p[i * k + y].max(LOG_FLOOR).ln();
        }
        let value = Tensor::scalar(total / b as f64);
        Ok(self.push(value, Op::CrossEntropy { probs: probs.0, labels: labels.to_vec() }))
    }

    /// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.nodes[a.0].value.shape().to_vec();
        let bshape = self.nodes[b.0].value.shape().to_vec();
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[1] {
            return Err(Error::dim(
                "matmul_nt",
                format!("expected [n, k] and [m, k], got {ashape:?} and {bshape:?}"),
            ));
        }
        let (n, k, m) = (ashape[0], ashape[1], bshape[0]);
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += ad[i * k + t] * bd[j * k + t];
                }
                out[i * m + j] = s;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatmulNt { a: a.0, b: b.0 }))
    }

    fn elementwise2(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let ashape = self.nodes[a.0].value.shape().to_vec();
        let bshape = self.nodes[b.0].value.shape().to_vec();
        if ashape != bshape {
            return Err(Error::dim(op_name, format!("shape {ashape:?} != shape {bshape:?}")));
        }
        Ok((
            ashape,
            self.nodes[a.0].value.data().to_vec(),
            self.nodes[b.0].value.data().to_vec(),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, ad, bd) = self.elementwise2("add", a, b)?;
        let out = ad.iter().zip(&bd).map(|(x, y)| x + y).collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, ad, bd) = self.elementwise2("sub", a, b)?;
        let out = ad.iter().zip(&bd).map(|(x, y)| x - y).collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, ad, bd) = self.elementwise2("mul", a, b)?;
        let out = ad.iter().zip(&bd).map(|(x, y)| x * y).collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn neg(&mut self, input: Var) -> Var {
        let out = self.nodes[input.0].value.map(|v| -v);
        self.push(out, Op::Neg { input: input.0 })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.nodes[input.0].value.map(|v| v * factor);
        self.push(out, Op::Scale { input: input.0, factor })
    }

    /// Add a constant tensor; gradients pass through unchanged.
    pub fn offset(&mut self, input: Var, c: &Tensor) -> Result<Var> {
        if c.shape() != self.nodes[input.0].value.shape() {
            return Err(Error::dim(
                "offset",
                format!("constant shape {:?} != input shape {:?}", c.shape(), self.nodes[input.0].value.shape()),
            ));
        }
        let data = self.nodes[input.0]
            .value
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = c.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Offset { input: input.0 }))
    }

    /// Multiply by a constant mask; the mask receives no gradient.
    pub fn mul_mask(&mut self, input: Var, mask: &Tensor) -> Result<Var> {
        if mask.shape() != self.nodes[input.0].value.shape() {
            return Err(Error::dim(
                "mul_mask",
                format!("mask shape {:?} != input shape {:?}", mask.shape(), self.nodes[input.0].value.shape()),
            ));
        }
        let data = self.nodes[input.0]
            .value
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = mask.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::MulMask { input: input.0, mask: mask.clone() }))
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let out = self.nodes[input.0].value.map(f64::exp);
        self.push(out, Op::Exp { input: input.0 })
    }

    /// Elementwise `ln(max(x, 1e-12))`.
    pub fn ln(&mut self, input: Var) -> Var {
        let out = self.nodes[input.0].value.map(|v| v.max(LOG_FLOOR).ln());
        self.push(out, Op::Ln { input: input.0 })
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let s: f64 = self.nodes[input.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { input: input.0 })
    }

    pub fn mean_all(&mut self, input: Var) -> Var {
        let d = self.nodes[input.0].value.data();
        let s: f64 = d.iter().sum();
        let n = d.len() as f64;
        self.push(Tensor::scalar(s / n), Op::MeanAll { input: input.0 })
    }

    /// Row sums of a 2-D tensor: `[n, m] -> [n]`.
    pub fn row_sum(&mut self, input: Var) -> Result<Var> {
        let xs = self.nodes[input.0].value.shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::dim("row_sum", format!("expected 2-D input, got {xs:?}")));
        }
        let (n, m) = (xs[0], xs[1]);
        let x = self.nodes[input.0].value.data();
        let out = (0..n).map(|i| x[i * m..(i + 1) * m].iter().sum()).collect();
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::RowSum { input: input.0 }))
    }

    /// Scale each row of `[n, d]` to unit Euclidean norm. Rows with norm
    /// below 1e-12 are divided by the floor instead.
    pub fn l2_normalize_rows(&mut self, input: Var) -> Result<Var> {
        let xs = self.nodes[input.0].value.shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::dim("l2_normalize_rows", format!("expected 2-D input, got {xs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        let x = self.nodes[input.0].value.data();
        let mut out = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = norm;
            let div = norm.max(NORM_EPS);
            for j in 0..d {
                out[i * d + j] = row[j] / div;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::L2NormalizeRows { input: input.0, norms },
        ))
    }

    /// Squared Euclidean distances between rows: `[n, d] × [m, d] -> [n, m]`.
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.nodes[a.0].value.shape().to_vec();
        let bshape = self.nodes[b.0].value.shape().to_vec();
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[1] {
            return Err(Error::dim(
                "pairwise_sqdist",
                format!("expected [n, d] and [m, d], got {ashape:?} and {bshape:?}"),
            ));
        }
        let (n, d, m) = (ashape[0], ashape[1], bshape[0]);
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..d {
                    let diff = ad[i * d + t] - bd[j * d + t];
                    s += diff * diff;
                }
                out[i * m + j] = s;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::PairwiseSqDist { a: a.0, b: b.0 }))
    }

    /// KL divergence between diagonal-Gaussian fits of two row sets,
    /// `KL(N(μ_a, diag σ²_a) ‖ N(μ_b, diag σ²_b))`, with per-dimension
    /// variances floored at `var_floor` (population 1/n moments).
    pub fn kl_gaussian(&mut self, a: Var, b: Var, var_floor: f64) -> Result<Var> {
        let ashape = self.nodes[a.0].value.shape().to_vec();
        let bshape = self.nodes[b.0].value.shape().to_vec();
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[1] {
            return Err(Error::dim(
                "kl_gaussian",
                format!("expected [n, d] and [m, d], got {ashape:?} and {bshape:?}"),
            ));
        }
        if ashape[0] < 2 || bshape[0] < 2 {
            return Err(Error::Input(format!(
                "kl_gaussian requires at least 2 rows per set, got {} and {}",
                ashape[0], bshape[0]
            )));
        }
        let d = ashape[1];
        let (mu_a, var_a) = moments(self.nodes[a.0].value.data(), ashape[0], d, var_floor);
        let (mu_b, var_b) = moments(self.nodes[b.0].value.data(), bshape[0], d, var_floor);
        let mut kl = 0.0;
        for t in 0..d {
            let dm = mu_a[t] - mu_b[t];
            kl += 0.5 * (var_b[t] / var_a[t]).ln() + (var_a[t] + dm * dm) / (2.0 * var_b[t]) - 0.5;
        }
        Ok(self.push(Tensor::scalar(kl), Op::KlGaussian { a: a.0, b: b.0, var_floor }))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[input.0].value.reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { input: input.0 }))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let xs = self.nodes[input.0].value.shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::dim("slice_rows", format!("expected 2-D input, got {xs:?}")));
        }
        if start >= end || end > xs[0] {
            return Err(Error::dim(
                "slice_rows",
                format!("row range {start}..{end} invalid for {} rows", xs[0]),
            ));
        }
        let m = xs[1];
        let data = self.nodes[input.0].value.data()[start * m..end * m].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![end - start, m], data),
            Op::SliceRows { input: input.0, start },
        ))
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn detach(&mut self, input: Var) -> Var {
        let value = self.nodes[input.0].value.clone();
        self.push(value, Op::Detach)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Propagate gradients from a scalar loss node, adding into any
    /// gradients accumulated by earlier backward calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward op".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let n = self.nodes.len();
        let mut g: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        g[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let Some(gi) = g[i].take() else { continue };
            self.backprop_node(i, &gi, &mut g)?;
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(gi),
            }
        }
        // Nodes the loss does not reach get explicit zero gradients.
        for node in &mut self.nodes {
            if node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        self.ran_backward = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gi: &Tensor, g: &mut [Option<Tensor>]) -> Result<()> {
        fn acc<'a>(g: &'a mut [Option<Tensor>], idx: usize, shape: &[usize]) -> &'a mut [f64] {
            g[idx]
                .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
                .data_mut()
        }
        let gd = gi.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias } => {
                let xs = self.nodes[*input].value.shape();
                let ks = self.nodes[*kernel].value.shape();
                let (b, c, w) = (xs[0], xs[1], xs[3]);
                let (co, k) = (ks[0], ks[3]);
                let ow = w - k + 1;
                let x = self.nodes[*input].value.data().to_vec();
                let kd = self.nodes[*kernel].value.data().to_vec();
                {
                    let gb = acc(g, *bias, &[co]);
                    for n in 0..b {
                        for o in 0..co {
                            for t in 0..ow {
                                gb[o] += gd[(n * co + o) * ow + t];
                            }
                        }
                    }
                }
                {
                    let gk = acc(g, *kernel, &[co, c, 1, k]);
                    for n in 0..b {
                        for o in 0..co {
                            for t in 0..ow {
                                let go = gd[(n * co + o) * ow + t];
                                for ch in 0..c {
                                    let xoff = (n * c + ch) * w + t;
                                    let koff = (o * c + ch) * k;
                                    for dk in 0..k {
                                        gk[koff + dk] += go * x[xoff + dk];
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let gx = acc(g, *input, &[b, c, 1, w]);
                    for n in 0..b {
                        for o in 0..co {
                            for t in 0..ow {
                                let go = gd[(n * co + o) * ow + t];
                                for ch in 0..c {
                                    let xoff = (n * c + ch) * w + t;
                                    let koff = (o * c + ch) * k;
                                    for dk in 0..k {
                                        gx[xoff + dk] += go * kd[koff + dk];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.nodes[*input].value.data();
                let gx = acc(g, *input, self.nodes[*input].value.shape());
                for (j, (&xv, &gv)) in x.iter().zip(gd).enumerate() {
                    if xv > 0.0 {
                        gx[j] += gv;
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let gx = acc(g, *input, self.nodes[*input].value.shape());
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += gd[o];
                }
            }
            Op::Fc { input, weight, bias } => {
                let xs = self.nodes[*input].value.shape();
                let ws = self.nodes[*weight].value.shape();
                let (b, n) = (xs[0], xs[1]);
                let m = ws[0];
                let x = self.nodes[*input].value.data().to_vec();
                let wd = self.nodes[*weight].value.data().to_vec();
                {
                    let gb = acc(g, *bias, &[m]);
                    for i2 in 0..b {
                        for j in 0..m {
                            gb[j] += gd[i2 * m + j];
                        }
                    }
                }
                {
                    let gw = acc(g, *weight, &[m, n]);
                    for i2 in 0..b {
                        for j in 0..m {
                            let go = gd[i2 * m + j];
                            for k in 0..n {
                                gw[j * n + k] += go * x[i2 * n + k];
                            }
                        }
                    }
                }
                {
                    let gx = acc(g, *input, &[b, n]);
                    for i2 in 0..b {
                        for j in 0..m {
                            let go = gd[i2 * m + j];
                            for k in 0..n {
                                gx[i2 * n + k] += go * wd[j * n + k];
                            }
                        }
                    }
                }
            }
            Op::Softmax { input } => {
                let s = self.nodes[i].value.data();
                let shape = self.nodes[i].value.shape();
                let (b, k) = (shape[0], shape[1]);
                let gx = acc(g, *input, shape);
                for r in 0..b {
                    let row = &s[r * k..(r + 1) * k];
                    let grow = &gd[r * k..(r + 1) * k];
                    let dot: f64 = row.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                    for j in 0..k {
                        gx[r * k + j] += row[j] * (grow[j] - dot);
                    }
                }
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.nodes[*probs].value.data();
                let shape = self.nodes[*probs].value.shape();
                let (b, k) = (shape[0], shape[1]);
                let g0 = gd[0];
                let gp = acc(g, *probs, shape);
                for (r, &y) in labels.iter().enumerate() {
                    let pv = p[r * k + y];
                    if pv > LOG_FLOOR {
                        gp[r * k + y] += g0 * (-1.0 / (b as f64 * pv));
                    }
                }
            }
            Op::MatmulNt { a, b } => {
                let ashape = self.nodes[*a].value.shape();
                let bshape = self.nodes[*b].value.shape();
                let (n, k, m) = (ashape[0], ashape[1], bshape[0]);
                let ad = self.nodes[*a].value.data().to_vec();
                let bd = self.nodes[*b].value.data().to_vec();
                {
                    let ga = acc(g, *a, &[n, k]);
                    for i2 in 0..n {
                        for j in 0..m {
                            let go = gd[i2 * m + j];
                            for t in 0..k {
                                ga[i2 * k + t] += go * bd[j * k + t];
                            }
                        }
                    }
                }
                {
                    let gb = acc(g, *b, &[m, k]);
                    for i2 in 0..n {
                        for j in 0..m {
                            let go = gd[i2 * m + j];
                            for t in 0..k {
                                gb[j * k + t] += go * ad[i2 * k + t];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for (j, &gv) in gd.iter().enumerate() {
                    acc(g, *a, gi.shape())[j] += gv;
                }
                for (j, &gv) in gd.iter().enumerate() {
                    acc(g, *b, gi.shape())[j] += gv;
                }
            }
            Op::Sub { a, b } => {
                for (j, &gv) in gd.iter().enumerate() {
                    acc(g, *a, gi.shape())[j] += gv;
                }
                for (j, &gv) in gd.iter().enumerate() {
                    acc(g, *b, gi.shape())[j] -= gv;
                }
            }
            Op::Mul { a, b } => {
                let ad = self.nodes[*a].value.data().to_vec();
                let bd = self.nodes[*b].value.data().to_vec();
                {
                    let ga = acc(g, *a, gi.shape());
                    for (j, &gv) in gd.iter().enumerate() {
                        ga[j] += gv * bd[j];
                    }
                }
                {
                    let gb = acc(g, *b, gi.shape());
                    for (j, &gv) in gd.iter().enumerate() {
                        gb[j] += gv * ad[j];
                    }
                }
            }
            Op::Neg { input } => {
                let gx = acc(g, *input, gi.shape());
                for (j, &gv) in gd.iter().enumerate() {
                    gx[j] -= gv;
                }
            }
            Op::Scale { input, factor } => {
                let gx = acc(g, *input, gi.shape());
                for (j, &gv) in gd.iter().enumerate() {
                    gx[j] += gv * factor;
                }
            }
            Op::Offset { input } | Op::Reshape { input } => {
                let gx = acc(g, *input, self.nodes[*input].value.shape());
                for (j, &gv) in gd.iter().enumerate() {
                    gx[j] += gv;
                }
            }
            Op::SliceRows { input, start } => {
                let m = self.nodes[*input].value.shape()[1];
                let gx = acc(g, *input, self.nodes[*input].value.shape());
                for (j, &gv) in gd.iter().enumerate() {
                    gx[start * m + j] += gv;
                }
            }
            Op::MulMask { input, mask } => {
                let gx = acc(g, *input, gi.shape());
                for (j, (&gv, &mv)) in gd.iter().zip(mask.data()).enumerate() {
                    gx[j] += gv * mv;
                }
            }
            Op::Exp { input } => {
                let out = self.nodes[i].value.data();
                let gx = acc(g, *input, gi.shape());
                for (j, (&gv, &ov)) in gd.iter().zip(out).enumerate() {
                    gx[j] += gv * ov;
                }
            }
            Op::Ln { input } => {
                let x = self.nodes[*input].value.data();
                let gx = acc(g, *input, gi.shape());
                for (j, (&gv, &xv)) in gd.iter().zip(x).enumerate() {
                    if xv > LOG_FLOOR {
                        gx[j] += gv / xv;
                    }
                }
            }
            Op::SumAll { input } => {
                let g0 = gd[0];
                let gx = acc(g, *input, self.nodes[*input].value.shape());
                for v in gx.iter_mut() {
                    *v += g0;
                }
            }
            Op::MeanAll { input } => {
                let n = self.nodes[*input].value.len() as f64;
                let g0 = gd[0] / n;
                let gx = acc(g, *input, self.nodes[*input].value.shape());
                for v in gx.iter_mut() {
                    *v += g0;
                }
            }
            Op::RowSum { input } => {
                let shape = self.nodes[*input].value.shape();
                let (n, m) = (shape[0], shape[1]);
                let gx = acc(g, *input, shape);
                for r in 0..n {
                    for c in 0..m {
                        gx[r * m + c] += gd[r];
                    }
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                let shape = self.nodes[*input].value.shape();
                let (n, d) = (shape[0], shape[1]);
                let out = self.nodes[i].value.data();
                let gx = acc(g, *input, shape);
                for r in 0..n {
                    let z = &out[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    if norms[r] > NORM_EPS {
                        let dot: f64 = z.iter().zip(grow).map(|(zv, gv)| zv * gv).sum();
                        for j in 0..d {
                            gx[r * d + j] += (grow[j] - z[j] * dot) / norms[r];
                        }
                    } else {
                        // Floored row: the divisor is the constant floor.
                        for j in 0..d {
                            gx[r * d + j] += grow[j] / NORM_EPS;
                        }
                    }
                }
            }
            Op::PairwiseSqDist { a, b } => {
                let ashape = self.nodes[*a].value.shape();
                let bshape = self.nodes[*b].value.shape();
                let (n, d, m) = (ashape[0], ashape[1], bshape[0]);
                let ad = self.nodes[*a].value.data().to_vec();
                let bd = self.nodes[*b].value.data().to_vec();
                {
                    let ga = acc(g, *a, &[n, d]);
                    for i2 in 0..n {
                        for j in 0..m {
                            let go = gd[i2 * m + j];
                            for t in 0..d {
                                ga[i2 * d + t] += go * 2.0 * (ad[i2 * d + t] - bd[j * d + t]);
                            }
                        }
                    }
                }
                {
                    let gb = acc(g, *b, &[m, d]);
                    for i2 in 0..n {
                        for j in 0..m {
                            let go = gd[i2 * m + j];
                            for t in 0..d {
                                gb[j * d + t] -= go * 2.0 * (ad[i2 * d + t] - bd[j * d + t]);
                            }
                        }
                    }
                }
            }
            Op::KlGaussian { a, b, var_floor } => {
                let ashape = self.nodes[*a].value.shape().to_vec();
                let bshape = self.nodes[*b].value.shape().to_vec();
                let (na, d, nb) = (ashape[0], ashape[1], bshape[0]);
                let ad = self.nodes[*a].value.data().to_vec();
                let bd = self.nodes[*b].value.data().to_vec();
                let (mu_a, var_a) = moments(&ad, na, d, *var_floor);
                let (mu_b, var_b) = moments(&bd, nb, d, *var_floor);
                let (raw_var_a, raw_var_b) = (raw_variances(&ad, na, d, &mu_a), raw_variances(&bd, nb, d, &mu_b));
                let g0 = gd[0];
                let mut dkl_dmu_a = vec![0.0; d];
                let mut dkl_dvar_a = vec![0.0; d];
                let mut dkl_dmu_b = vec![0.0; d];
                let mut dkl_dvar_b = vec![0.0; d];
                for t in 0..d {
                    let dm = mu_a[t] - mu_b[t];
                    dkl_dmu_a[t] = dm / var_b[t];
                    dkl_dmu_b[t] = -dm / var_b[t];
                    // The floor makes a variance locally constant.
                    dkl_dvar_a[t] = if raw_var_a[t] > *var_floor {
                        -0.5 / var_a[t] + 0.5 / var_b[t]
                    } else {
                        0.0
                    };
                    dkl_dvar_b[t] = if raw_var_b[t] > *var_floor {
                        0.5 / var_b[t] - (var_a[t] + dm * dm) / (2.0 * var_b[t] * var_b[t])
                    } else {
                        0.0
                    };
                }
                {
                    let ga = acc(g, *a, &ashape);
                    for r in 0..na {
                        for t in 0..d {
                            let x = ad[r * d + t];
                            ga[r * d + t] += g0
                                * (dkl_dmu_a[t] / na as f64
                                    + dkl_dvar_a[t] * 2.0 * (x - mu_a[t]) / na as f64);
                        }
                    }
                }
                {
                    let gb = acc(g, *b, &bshape);
                    for r in 0..nb {
                        for t in 0..d {
                            let x = bd[r * d + t];
                            gb[r * d + t] += g0
                                * (dkl_dmu_b[t] / nb as f64
                                    + dkl_dvar_b[t] * 2.0 * (x - mu_b[t]) / nb as f64);
                        }
                    }
                }
            }
            Op::Detach => {}
        }
        Ok(())
    }

    /// Smallest margin to a non-smooth point recorded on this tape
    /// (ReLU zero crossings, maxpool ties, log floors, variance floors).
    /// Finite-difference oracles are only valid when this margin exceeds
    /// the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &x in self.nodes[*input].value.data() {
                        margin = margin.min(x.abs());
                    }
                }
                Op::MaxPool2d { input, .. } => {
                    let xs = self.nodes[*input].value.shape();
                    let (b, c, w) = (xs[0], xs[1], xs[3]);
                    let x = self.nodes[*input].value.data();
                    for n in 0..b {
                        for ch in 0..c {
                            let row = (n * c + ch) * w;
                            for t in 0..(w / 2) {
                                let (a, b2) = (x[row + 2 * t], x[row + 2 * t + 1]);
                                // A pair of rectifier-clamped zeros is
                                // locally constant, not a crossing.
                                if a == 0.0 && b2 == 0.0 {
                                    continue;
                                }
                                margin = margin.min((a - b2).abs());
                            }
                        }
                    }
                }
                Op::Ln { input } => {
                    for &x in self.nodes[*input].value.data() {
                        margin = margin.min((x - LOG_FLOOR).abs());
                    }
                }
                Op::CrossEntropy { probs, labels } => {
                    let shape = self.nodes[*probs].value.shape();
                    let k = shape[1];
                    let p = self.nodes[*probs].value.data();
                    for (r, &y) in labels.iter().enumerate() {
                        margin = margin.min((p[r * k + y] - LOG_FLOOR).abs());
                    }
                }
                Op::KlGaussian { a, b, var_floor } => {
                    // Both the floor crossing and the 1/σ² curvature just
                    // above it poison a fixed-step central difference;
                    // treat the whole band around the floor as a kink.
                    for &side in &[*a, *b] {
                        let shape = self.nodes[side].value.shape();
                        let (n, d) = (shape[0], shape[1]);
                        let (mu, _) = moments(self.nodes[side].value.data(), n, d, *var_floor);
                        let raw = raw_variances(self.nodes[side].value.data(), n, d, &mu);
                        for &v in &raw {
                            if v > var_floor / 10.0 && v < 1e-2 {
                                margin = 0.0;
                            }
                        }
                    }
                }
                Op::L2NormalizeRows { norms, .. } => {
                    // Near-zero rows are smooth but carry ~1/‖z‖³
                    // third-derivative terms; a 1e-5 central difference
                    // keeps ~1e-4 truncation error until ‖z‖ ≈ 5e-2.
                    for &n in norms {
                        if n < 5e-2 {
                            margin = 0.0;
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

fn moments(data: &[f64], n: usize, d: usize, var_floor: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; d];
    for r in 0..n {
        for t in 0..d {
            mu[t] += data[r * d + t];
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut var = raw_variances(data, n, d, &mu);
    for v in var.iter_mut() {
        *v = v.max(var_floor);
    }
    (mu, var)
}

fn raw_variances(data: &[f64], n: usize, d: usize, mu: &[f64]) -> Vec<f64> {
    let mut var = vec![0.0; d];
    for r in 0..n {
        for t in 0..d {
            let diff = data[r * d + t] - mu[t];
            var[t] += diff * diff;
        }
    }
    for v in var.iter_mut() {
        *v /= n as f64;
    }
    var
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{finite_diff_grad, max_relative_error};
    use crate::rng;
    use rand::Rng;

    fn t4(b: usize, c: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![b, c, 1, w], data).unwrap()
    }

    /// Independent direct-summation convolution, written against the
    /// definition rather than the production loop structure.
    fn conv_oracle(x: &Tensor, k: &Tensor, bias: &Tensor) -> Tensor {
        let (b, c, w) = (x.shape()[0], x.shape()[1], x.shape()[3]);
        let (co, kw) = (k.shape()[0], k.shape()[3]);
        let ow = w - kw + 1;
        let mut out = Tensor::zeros(vec![b, co, 1, ow]);
        for n in 0..b {
            for o in 0..co {
                for t in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for dk in 0..kw {
                            acc += x.data()[(n * c + ch) * w + t + dk]
                                * k.data()[(o * c + ch) * kw + dk];
                        }
                    }
                    out.data_mut()[(n * co + o) * ow + t] = acc + bias.data()[o];
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_hand_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4(1, 1, 3, vec![1.0, 2.0, 3.0]));
        let k = tape.leaf(t4(1, 1, 2, vec![1.0, 1.0]));
        let b = tape.leaf(Tensor::from_slice(&[0.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 2]);
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn conv2d_zero_kernel_emits_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4(2, 3, 5, (0..30).map(|i| i as f64).collect()));
        let k = tape.leaf(Tensor::zeros(vec![2, 3, 1, 2]));
        let b = tape.leaf(Tensor::from_slice(&[7.0, 7.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn conv2d_shape_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![64, 45, 1, 125]));
        let k = tape.leaf(Tensor::zeros(vec![16, 45, 1, 9]));
        let b = tape.leaf(Tensor::zeros(vec![16]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[64, 16, 1, 117]);
    }

    #[test]
    fn conv2d_rejects_bad_axes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 1, 8]));
        let k_badc = tape.leaf(Tensor::zeros(vec![3, 4, 1, 3]));
        let b3 = tape.leaf(Tensor::zeros(vec![3]));
        let err = tape.conv2d(x, k_badc, b3).unwrap_err();
        assert!(err.to_string().contains("in-channel axis"), "{err}");
        let k_wide = tape.leaf(Tensor::zeros(vec![3, 2, 1, 9]));
        assert!(tape.conv2d(x, k_wide, b3).is_err());
    }

    #[test]
    fn conv2d_matches_direct_summation_on_random_shapes() {
        let mut master = rng::stream(11, &[1]);
        for _ in 0..40 {
            let b = master.random_range(1..=4usize);
            let c = master.random_range(1..=4usize);
            let co = master.random_range(1..=4usize);
            let w = master.random_range(2..=16usize);
            let k = master.random_range(1..=w);
            let x = Tensor::uniform(vec![b, c, 1, w], -2.0, 2.0, &mut master);
            let kd = Tensor::uniform(vec![co, c, 1, k], -2.0, 2.0, &mut master);
            let bias = Tensor::uniform(vec![co], -1.0, 1.0, &mut master);
            let expect = conv_oracle(&x, &kd, &bias);
            let mut tape = Tape::new();
            let (xv, kv, bv) = (tape.leaf(x), tape.leaf(kd), tape.leaf(bias));
            let y = tape.conv2d(xv, kv, bv).unwrap();
            for (a, e) in tape.value(y).data().iter().zip(expect.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let neg = tape.leaf(Tensor::from_slice(&[-3.0, -0.5]));
        let yn = tape.relu(neg);
        assert!(tape.value(yn).data().iter().all(|&v| v == 0.0));

        let pos = tape.leaf(Tensor::from_slice(&[0.0, 1.5, 3.0]));
        let yp = tape.relu(pos);
        assert_eq!(tape.value(yp).data(), tape.value(pos).data());
    }

    #[test]
    fn maxpool_takes_pair_max_and_drops_odd_tail() {
        let mut tape = Tape::new();
        let x = tape.leaf(t4(1, 1, 4, vec![1.0, 3.0, 2.0, 2.0]));
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0]);

        let c = tape.leaf(t4(1, 1, 6, vec![0.7; 6]));
        let yc = tape.maxpool2d(c).unwrap();
        assert_eq!(tape.value(yc).shape(), &[1, 1, 1, 3]);
        assert!(tape.value(yc).data().iter().all(|&v| v == 0.7));

        let odd = tape.leaf(t4(1, 1, 5, vec![5.0, 1.0, 4.0, 2.0, 9.0]));
        let yo = tape.maxpool2d(odd).unwrap();
        assert_eq!(tape.value(yo).data(), &[5.0, 4.0]);

        let narrow = tape.leaf(t4(1, 1, 1, vec![1.0]));
        assert!(tape.maxpool2d(narrow).is_err());
    }

    #[test]
    fn fc_matches_hand_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());

        let eye = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zb = tape.leaf(Tensor::zeros(vec![2]));
        let y = tape.fc(x, eye, zb).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let zw = tape.leaf(Tensor::zeros(vec![3, 2]));
        let b3 = tape.leaf(Tensor::from_slice(&[0.1, 0.2, 0.3]));
        let yz = tape.fc(x, zw, b3).unwrap();
        assert_eq!(tape.value(yz).data(), &[0.1, 0.2, 0.3]);

        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::from_slice(&[0.0, 1.0]));
        let ya = tape.fc(x, w, b).unwrap();
        assert_eq!(tape.value(ya).data(), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut master = rng::stream(3, &[2]);
        for _ in 0..20 {
            let b = master.random_range(1..=5usize);
            let k = master.random_range(2..=9usize);
            let logits = Tensor::uniform(vec![b, k], -4.0, 4.0, &mut master);
            let shift: f64 = master.random_range(-3.0..3.0);
            let shifted = logits.map(|v| v + shift);

            let mut tape = Tape::new();
            let l = tape.leaf(logits);
            let s = tape.leaf(shifted);
            let p1 = tape.softmax(l).unwrap();
            let p2 = tape.softmax(s).unwrap();
            for i in 0..b {
                let row = &tape.value(p1).data()[i * k..(i + 1) * k];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            }
            for (a, bb) in tape.value(p1).data().iter().zip(tape.value(p2).data()) {
                assert!((a - bb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let uni = tape.leaf(Tensor::new(vec![1, 8], vec![0.3; 8]).unwrap());
        let pu = tape.softmax(uni).unwrap();
        for &p in tape.value(pu).data() {
            assert!((p - 0.125).abs() < 1e-12);
        }
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap());
        let p = tape.softmax(x).unwrap();
        assert!((tape.value(p).data()[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(p).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_gives_ones_and_half_square_gives_x() {
        let x0 = Tensor::from_slice(&[0.5, -1.5, 2.0, 0.25]);

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let sq = tape.mul(x, x).unwrap();
        let half = tape.sum_all(sq);
        let loss = tape.scale(half, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), x0.data());
    }

    #[test]
    fn grad_before_backward_is_state_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1.0]));
        match tape.grad(x) {
            Err(Error::State(_)) => {}
            other => panic!("expected state error, got {other:?}"),
        }
        let mut empty = Tape::new();
        assert!(matches!(empty.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn backward_on_nonscalar_is_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn repeated_backward_accumulates_additively() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[2.0, 3.0]));
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn forward_ops_are_bitwise_deterministic() {
        let run = || {
            let mut r = rng::stream(99, &[7]);
            let x = Tensor::uniform(vec![2, 3, 1, 10], -1.0, 1.0, &mut r);
            let k = Tensor::uniform(vec![4, 3, 1, 3], -1.0, 1.0, &mut r);
            let b = Tensor::uniform(vec![4], -0.5, 0.5, &mut r);
            let mut tape = Tape::new();
            let (xv, kv, bv) = (tape.leaf(x), tape.leaf(k), tape.leaf(b));
            let c = tape.conv2d(xv, kv, bv).unwrap();
            let r1 = tape.relu(c);
            let p = tape.maxpool2d(r1).unwrap();
            tape.value(p).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    /// Per-layer finite-difference checks on small random instances.
    /// The 100-seed full-objective sweep lives in the acceptance suite.
    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut master = rng::stream(17, &[5]);
        for trial in 0..8 {
            let b = master.random_range(1..=3usize);
            let c = master.random_range(1..=3usize);
            let co = master.random_range(1..=3usize);
            let w = master.random_range(4..=10usize);
            let k = master.random_range(1..=3usize);
            let x = Tensor::uniform(vec![b, c, 1, w], -1.5, 1.5, &mut master);
            let kd = Tensor::uniform(vec![co, c, 1, k], -1.0, 1.0, &mut master);
            let bias = Tensor::uniform(vec![co], -0.5, 0.5, &mut master);
            let m = master.random_range(2..=4usize);

            // Conv output width, then the floor-halving pool.
            let ow = w - k + 1;
            let pw = ow / 2;
            if pw == 0 {
                continue;
            }
            let fcw = Tensor::uniform(vec![m, co * pw], -1.0, 1.0, &mut master);
            let fcb = Tensor::uniform(vec![m], -0.5, 0.5, &mut master);
            let labels: Vec<usize> = (0..b).map(|_| master.random_range(0..m)).collect();

            let eval = |params: &[Tensor]| -> crate::Result<(Tape, Var, Vec<Var>)> {
                let mut tape = Tape::new();
                let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
                let conv = tape.conv2d(vars[0], vars[1], vars[2])?;
                let act = tape.relu(conv);
                let pool = tape.maxpool2d(act)?;
                let flat = tape.reshape(pool, vec![b, co * pw])?;
                let logits = tape.fc(flat, vars[3], vars[4])?;
                let probs = tape.softmax(logits)?;
                let loss = tape.cross_entropy(probs, &labels)?;
                Ok((tape, loss, vars))
            };

            let params = vec![x, kd, bias, fcw, fcb];
            let (mut tape, loss, vars) = eval(&params).unwrap();
            if tape.kink_margin() < 1e-4 {
                continue; // finite differences are invalid across a kink
            }
            tape.backward(loss).unwrap();
            let analytic: Vec<Tensor> =
                vars.iter().map(|&v| tape.grad(v).unwrap().clone()).collect();
            let numeric = finite_diff_grad(
                |p| {
                    let (t, l, _) = eval(p)?;
                    Ok(t.value(l).item())
                },
                &params,
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "trial {trial}: max rel err {err}");
        }
    }

    #[test]
    fn kl_and_pairwise_gradients_match_finite_differences() {
        let mut master = rng::stream(23, &[9]);
        for _ in 0..6 {
            let n = master.random_range(2..=5usize);
            let m = master.random_range(2..=5usize);
            let d = master.random_range(1..=4usize);
            let a = Tensor::uniform(vec![n, d], -2.0, 2.0, &mut master);
            let b = Tensor::uniform(vec![m, d], -2.0, 2.0, &mut master);

            let eval = |params: &[Tensor]| -> crate::Result<f64> {
                let mut tape = Tape::new();
                let av = tape.leaf(params[0].clone());
                let bv = tape.leaf(params[1].clone());
                let dmat = tape.pairwise_sqdist(av, bv)?;
                let kmat = tape.scale(dmat, -0.5);
                let kexp = tape.exp(kmat);
                let s = tape.mean_all(kexp);
                let kl = tape.kl_gaussian(av, bv, 1e-6)?;
                let total = tape.add(s, kl)?;
                Ok(tape.value(total).item())
            };

            let params = vec![a, b];
            let mut tape = Tape::new();
            let av = tape.leaf(params[0].clone());
            let bv = tape.leaf(params[1].clone());
            let dmat = tape.pairwise_sqdist(av, bv).unwrap();
            let kmat = tape.scale(dmat, -0.5);
            let kexp = tape.exp(kmat);
            let s = tape.mean_all(kexp);
            let kl = tape.kl_gaussian(av, bv, 1e-6).unwrap();
            let total = tape.add(s, kl).unwrap();
            tape.backward(total).unwrap();
            let analytic = vec![
                tape.grad(av).unwrap().clone(),
                tape.grad(bv).unwrap().clone(),
            ];
            let numeric = finite_diff_grad(eval, &params, 1e-5).unwrap();
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "max rel err {err}");
        }
    }

    #[test]
    fn l2_normalize_rows_unit_norm_and_gradient() {
        // Loss = Σ ẑ³ keeps the gradient through the normalization nontrivial.
        fn eval(params: &[Tensor]) -> crate::Result<(Tape, Var, Var)> {
            let mut tape = Tape::new();
            let xv = tape.leaf(params[0].clone());
            let z = tape.l2_normalize_rows(xv)?;
            let sq = tape.mul(z, z)?;
            let cubed = tape.mul(sq, z)?;
            let loss = tape.sum_all(cubed);
            Ok((tape, loss, xv))
        }

        let mut master = rng::stream(31, &[4]);
        let x = Tensor::uniform(vec![3, 4], -2.0, 2.0, &mut master);
        let (mut tape, loss, xv) = eval(std::slice::from_ref(&x)).unwrap();
        {
            let z = &tape.value(loss); // loss is scalar; check norms via a fresh pass below
            let _ = z;
        }
        let mut check = Tape::new();
        let cx = check.leaf(x.clone());
        let z = check.l2_normalize_rows(cx).unwrap();
        for i in 0..3 {
            let row = &check.value(z).data()[i * 4..(i + 1) * 4];
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        tape.backward(loss).unwrap();
        let analytic = vec![tape.grad(xv).unwrap().clone()];
        let numeric = finite_diff_grad(
            |p| {
                let (t, l, _) = eval(p)?;
                Ok(t.value(l).item())
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn slice_rows_takes_and_scatters() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = tape.slice_rows(x, 1, 3).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 2]);
        assert_eq!(tape.value(s).data(), &[3.0, 4.0, 5.0, 6.0]);
        let sum = tape.sum_all(s);
        tape.backward(sum).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(tape.slice_rows(x, 2, 2).is_err());
        assert!(tape.slice_rows(x, 0, 4).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0]));
        let d = tape.detach(x);
        let s = tape.sum_all(d);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    }
}
