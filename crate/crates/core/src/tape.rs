//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse recording order exactly once and accumulates
//! gradients into every node that transitively depends on a `requires_grad`
//! leaf. Forward values are checked for NaN/Inf after every op.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{col2im_add, gemm, im2col, normal_cdf, ConvGeom, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Gelu,
    Relu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            "gelu" => Ok(Self::Gelu),
            "relu" => Ok(Self::Relu),
            other => Err(Error::Invalid(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::Gelu => "gelu",
            Self::Relu => "relu",
        };
        f.write_str(s)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Sigmoid => sigmoid(x),
            Self::Tanh => x.tanh(),
            Self::Gelu => gelu(x),
            Self::Relu => x.max(0.0),
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Blend { g: Var, a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    MulConst { x: Var, factor: Vec<f64> },
    MulScalar { x: Var, s: Var },
    Act { x: Var, kind: Activation },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Transpose { x: Var },
    Reshape { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    Sum { x: Var },
    Mean { x: Var },
    SumLast { x: Var },
    MeanRows { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    BceLogits { x: Var, target: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Blend { g, a, b } => vec![*g, *a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::MulScalar { x, s } => vec![*x, *s],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Scale { x, .. }
            | Op::AddConst { x }
            | Op::MulConst { x, .. }
            | Op::Act { x, .. }
            | Op::Softmax { x }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::GatherRows { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SumLast { x }
            | Op::MeanRows { x }
            | Op::BceLogits { x, .. } => vec![*x],
        }
    }
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
}

fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Returns the gradient buffer of `v`, allocating it on first touch, or
/// `None` when `v` does not participate in differentiation.
fn slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    requires: &[bool],
    values: &[Tensor],
    v: Var,
) -> Option<&'g mut [f64]> {
    if !requires[v.0] {
        return None;
    }
    let n = values[v.0].len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node: Op, requires: bool) -> Result<Var> {
        ensure_finite(op, &value)?;
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(node);
        Ok(Var(self.values.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulated gradient of `v` after [`Tape::backward`]; zeros when `v`
    /// requires grad but received none, `None` when it does not require grad.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.requires[v.0] {
            return None;
        }
        let shape = self.values[v.0].shape();
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.values[v.0].len()]);
        Some(Tensor::new(shape, data).expect("grad shape"))
    }

    /// Per-head attention weights `[heads × Nq × Nk]` recorded by [`Tape::attention`].
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.ops[v.0] {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn as_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => shape_err(op, format!("expected a matrix, got {s:?}")),
        }
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.as_matrix("matmul", a)?;
        let (br, bc) = self.as_matrix("matmul", b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err("matmul", format!("inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.values[a.0].data(),
            ta,
            self.values[b.0].data(),
            tb,
            &mut out,
            false,
        );
        let req = self.any_requires(&[a, b]);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, req)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.as_matrix("transpose", x)?;
        let src = self.values[x.0].data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let req = self.requires[x.0];
        self.push("transpose", Tensor::new(&[c, r], out)?, Op::Transpose { x }, req)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[x.0].clone().reshape(shape)?;
        let req = self.requires[x.0];
        self.push("reshape", t, Op::Reshape { x }, req)
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let data = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let req = self.any_requires(&[a, b]);
        self.push("add", t, Op::Add(a, b), req)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let req = self.any_requires(&[a, b]);
        self.push("sub", t, Op::Sub(a, b), req)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let req = self.any_requires(&[a, b]);
        self.push("mul", t, Op::Mul(a, b), req)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        let req = self.any_requires(&[a, b]);
        self.push("div", t, Op::Div(a, b), req)
    }

    /// Convex mix `g ⊙ a + (1 − g) ⊙ b`. Entries where `a == b` yield `a`
    /// exactly, so identical inputs pass through bit for bit.
    pub fn blend(&mut self, g: Var, a: Var, b: Var) -> Result<Var> {
        self.same_shape("blend", g, a)?;
        self.same_shape("blend", a, b)?;
        let data = self.values[g.0]
            .data()
            .iter()
            .zip(self.values[a.0].data())
            .zip(self.values[b.0].data())
            .map(|((&g, &a), &b)| if a == b { a } else { g * a + (1.0 - g) * b })
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let req = self.any_requires(&[g, a, b]);
        self.push("blend", t, Op::Blend { g, a, b }, req)
    }

    /// Adds `bias[n]` to every trailing row of `x[..×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.values[bias.0].len();
        if self.values[bias.0].rank() > 1 && self.shape(bias)[0] != 1 {
            return shape_err("add_bias", format!("bias must be a vector, got {:?}", self.shape(bias)));
        }
        if self.shape(x).last() != Some(&n) {
            return shape_err("add_bias", format!("{:?} + [{n}]", self.shape(x)));
        }
        let b = self.values[bias.0].data();
        let mut data = self.values[x.0].data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        let req = self.any_requires(&[x, bias]);
        self.push("add_bias", t, Op::AddBias { x, bias }, req)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.values[x.0].map(|v| v * c);
        let req = self.requires[x.0];
        self.push("scale", t, Op::Scale { x, c }, req)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.values[x.0].map(|v| v + c);
        let req = self.requires[x.0];
        self.push("add_const", t, Op::AddConst { x }, req)
    }

    /// Elementwise product with a constant tensor; no gradient flows into `factor`.
    pub fn mul_const(&mut self, x: Var, factor: &Tensor) -> Result<Var> {
        if self.shape(x) != factor.shape() {
            return shape_err("mul_const", format!("{:?} vs {:?}", self.shape(x), factor.shape()));
        }
        let data = self.values[x.0]
            .data()
            .iter()
            .zip(factor.data())
            .map(|(a, b)| a * b)
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        let req = self.requires[x.0];
        let f = if req { factor.data().to_vec() } else { Vec::new() };
        self.push("mul_const", t, Op::MulConst { x, factor: f }, req)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.values[s.0].len() != 1 {
            return shape_err("mul_scalar", format!("scalar expected, got {:?}", self.shape(s)));
        }
        let c = self.values[s.0].item();
        let t = self.values[x.0].map(|v| v * c);
        let req = self.any_requires(&[x, s]);
        self.push("mul_scalar", t, Op::MulScalar { x, s }, req)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let t = self.values[x.0].map(|v| kind.apply(v));
        let req = self.requires[x.0];
        let name = match kind {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        };
        self.push(name, t, Op::Act { x, kind }, req)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax over `axis` (must be the last axis), stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || axis != shape.len() - 1 {
            return shape_err("softmax", format!("axis {axis} on {shape:?}; only the last axis is supported"));
        }
        let n = shape[axis];
        let mut data = self.values[x.0].data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let req = self.requires[x.0];
        self.push("softmax", Tensor::new(&shape, data)?, Op::Softmax { x }, req)
    }

    /// Layer norm over the last dimension with variance epsilon 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let d = self.values[gamma.0].len();
        if self.shape(x).last() != Some(&d) || self.values[beta.0].len() != d {
            return shape_err(
                "layer_norm",
                format!("x {:?}, gamma [{d}], beta [{}]", self.shape(x), self.values[beta.0].len()),
            );
        }
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let src = self.values[x.0].data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let req = self.any_requires(&[x, gamma, beta]);
        let (xhat, rstd) = if req { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push("layer_norm", t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, req)
    }

    // ---------------------------------------------------------------- structure

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(p) => self.shape(*p).to_vec(),
            None => return shape_err("concat", "no inputs"),
        };
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} on {first:?}"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err("concat", format!("{first:?} vs {s:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.values[p.0].data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let req = self.any_requires(parts);
        self.push("concat", Tensor::new(&shape, data)?, Op::Concat { parts: parts.to_vec(), axis }, req)
    }

    /// Selects rows of the flattened `[rows × rest]` view; repeated indices allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || idx.is_empty() {
            return shape_err("gather_rows", "need a non-scalar input and at least one index");
        }
        let rows = shape[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err("gather_rows", format!("row {bad} out of {rows}"));
        }
        let src = self.values[x.0].data();
        let width = src.len() / rows;
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let req = self.requires[x.0];
        self.push("gather_rows", Tensor::new(&out_shape, data)?, Op::GatherRows { x, idx: idx.to_vec() }, req)
    }

    // ---------------------------------------------------------------- convolution

    /// Cross-correlation of `x[C×H×W]` with `w[C'×C×k×k]` plus `b[C']`,
    /// zero "same" padding of `k/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (c, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return shape_err("conv2d", format!("input must be C×H×W, got {s:?}")),
        };
        let (co, k) = match *self.shape(w) {
            [co, ci, k1, k2] if ci == c && k1 == k2 && (k1 == 1 || k1 == 3) => (co, k1),
            ref s => return shape_err("conv2d", format!("kernel {s:?} for {c} input channels (k ∈ {{1,3}})")),
        };
        if self.values[b.0].len() != co || stride == 0 {
            return shape_err("conv2d", format!("bias len {} for {co} outputs", self.values[b.0].len()));
        }
        let geom = ConvGeom::new(c, h, wd, k, stride);
        let cols = im2col(self.values[x.0].data(), &geom);
        let ncols = geom.col_cols();
        let mut out = vec![0.0; co * ncols];
        gemm(co, geom.col_rows(), ncols, self.values[w.0].data(), false, &cols, false, &mut out, false);
        let bias = self.values[b.0].data();
        for (row, bb) in out.chunks_exact_mut(ncols).zip(bias) {
            for v in row {
                *v += bb;
            }
        }
        let t = Tensor::new(&[co, geom.oh, geom.ow], out)?;
        let req = self.any_requires(&[x, w, b]);
        let cols = if req { cols } else { Vec::new() };
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom, cols }, req)
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].data().iter().sum();
        let req = self.requires[x.0];
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, req)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.values[x.0].data();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let req = self.requires[x.0];
        self.push("mean", Tensor::scalar(m), Op::Mean { x }, req)
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&n, lead)) = shape.split_last() else {
            return shape_err("sum_last", "scalar input");
        };
        let data: Vec<f64> = self.values[x.0].data().chunks_exact(n).map(|r| r.iter().sum()).collect();
        let req = self.requires[x.0];
        self.push("sum_last", Tensor::new(lead, data)?, Op::SumLast { x }, req)
    }

    /// Mean over the first axis: `[R × rest] -> [rest]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&rows, rest)) = shape.split_first() else {
            return shape_err("mean_rows", "scalar input");
        };
        let width: usize = rest.iter().product();
        let mut out = vec![0.0; width];
        for row in self.values[x.0].data().chunks_exact(width) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let req = self.requires[x.0];
        self.push("mean_rows", Tensor::new(rest, out)?, Op::MeanRows { x }, req)
    }

    // ---------------------------------------------------------------- fused ops

    /// Multi-head scaled dot-product attention on already-projected inputs.
    ///
    /// `q[Nq×d]`, `k[Nk×d]`, `v[Nk×d]`; head `h` uses columns `h·d/H..(h+1)·d/H`.
    /// `blocked[i·Nk + j]` removes key `j` for query `i`; a fully blocked row
    /// falls back to attending everywhere.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, blocked: Option<&[bool]>) -> Result<Var> {
        let (nq, d) = self.as_matrix("attention", q)?;
        let (nk, dk) = self.as_matrix("attention", k)?;
        if self.shape(v) != [nk, dk] || dk != d {
            return shape_err("attention", format!("q {:?} k {:?} v {:?}", self.shape(q), self.shape(k), self.shape(v)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Invalid(format!("model dim {d} not divisible by {heads} heads")));
        }
        if let Some(m) = blocked {
            if m.len() != nq * nk {
                return shape_err("attention", "mask size");
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.values[q.0].data(), self.values[k.0].data(), self.values[v.0].data());
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        let mut qh = vec![0.0; nq * dh];
        let mut kh = vec![0.0; nk * dh];
        let mut vh = vec![0.0; nk * dh];
        let mut oh = vec![0.0; nq * dh];
        for h in 0..heads {
            copy_cols(qv, d, h * dh, dh, &mut qh);
            copy_cols(kv, d, h * dh, dh, &mut kh);
            copy_cols(vv, d, h * dh, dh, &mut vh);
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(nq, dh, nk, &qh, false, &kh, true, p, false);
            for (i, row) in p.chunks_exact_mut(nk).enumerate() {
                let mask = blocked.map(|m| &m[i * nk..(i + 1) * nk]);
                let open = mask.is_none_or(|m| m.iter().any(|b| !b));
                for (j, s) in row.iter_mut().enumerate() {
                    *s *= scale;
                    if open && mask.is_some_and(|m| m[j]) {
                        *s = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(row);
            }
            gemm(nq, nk, dh, p, false, &vh, false, &mut oh, false);
            for i in 0..nq {
                out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
        }
        let req = self.any_requires(&[q, k, v]);
        self.push("attention", Tensor::new(&[nq, d], out)?, Op::Attention { q, k, v, heads, probs }, req)
    }

    /// Mean binary cross-entropy with logits against a constant target.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return shape_err("bce_with_logits", format!("{:?} vs {:?}", self.shape(x), target.shape()));
        }
        let xs = self.values[x.0].data();
        let n = xs.len() as f64;
        let loss = xs
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| softplus(l) - l * t)
            .sum::<f64>()
            / n;
        let req = self.requires[x.0];
        let tgt = if req { target.data().to_vec() } else { Vec::new() };
        self.push("bce_with_logits", Tensor::scalar(loss), Op::BceLogits { x, target: tgt }, req)
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from the single-element node `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss)));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let Tape { values, grads, requires, ops } = self;
        let values: &[Tensor] = values;
        let requires: &[bool] = requires;
        let out = &values[i];
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, requires, values, $v)
            };
        }
        match &ops[i] {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let k = if ta { values[a.0].shape()[0] } else { values[a.0].shape()[1] };
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                if let Some(da) = acc!(a) {
                    if ta {
                        gemm(k, n, m, bv, tb, g, true, da, true);
                    } else {
                        gemm(m, n, k, g, false, bv, !tb, da, true);
                    }
                }
                if let Some(db) = acc!(b) {
                    if tb {
                        gemm(n, m, k, g, true, av, ta, db, true);
                    } else {
                        gemm(k, m, n, av, !ta, g, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc!(v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = acc!(*a) {
                    add_into(d, g);
                }
                if let Some(d) = acc!(*b) {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(d) = acc!(a) {
                    for ((x, gy), bv) in d.iter_mut().zip(g).zip(values[b.0].data()) {
                        *x += gy * bv;
                    }
                }
                if let Some(d) = acc!(b) {
                    for ((x, gy), av) in d.iter_mut().zip(g).zip(values[a.0].data()) {
                        *x += gy * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let bv = values[b.0].data();
                if let Some(d) = acc!(a) {
                    for ((x, gy), bb) in d.iter_mut().zip(g).zip(bv) {
                        *x += gy / bb;
                    }
                }
                if let Some(d) = acc!(b) {
                    for (((x, gy), bb), yy) in d.iter_mut().zip(g).zip(bv).zip(out.data()) {
                        *x -= gy * yy / bb;
                    }
                }
            }
            Op::Blend { g: gate, a, b } => {
                let (gate, a, b) = (*gate, *a, *b);
                let (gv, av, bv) = (values[gate.0].data(), values[a.0].data(), values[b.0].data());
                if let Some(d) = acc!(gate) {
                    for (i, x) in d.iter_mut().enumerate() {
                        *x += g[i] * (av[i] - bv[i]);
                    }
                }
                if let Some(d) = acc!(a) {
                    for (i, x) in d.iter_mut().enumerate() {
                        *x += g[i] * gv[i];
                    }
                }
                if let Some(d) = acc!(b) {
                    for (i, x) in d.iter_mut().enumerate() {
                        *x += g[i] * (1.0 - gv[i]);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                if let Some(d) = acc!(x) {
                    add_into(d, g);
                }
                if let Some(d) = acc!(bias) {
                    let n = d.len();
                    for row in g.chunks_exact(n) {
                        add_into(d, row);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(d) = acc!(*x) {
                    for (x, gy) in d.iter_mut().zip(g) {
                        *x += c * gy;
                    }
                }
            }
            Op::AddConst { x } | Op::Reshape { x } => {
                if let Some(d) = acc!(*x) {
                    add_into(d, g);
                }
            }
            Op::MulConst { x, factor } => {
                if let Some(d) = acc!(*x) {
                    for ((x, gy), f) in d.iter_mut().zip(g).zip(factor) {
                        *x += gy * f;
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let (x, s) = (*x, *s);
                let c = values[s.0].item();
                if let Some(d) = acc!(x) {
                    for (x, gy) in d.iter_mut().zip(g) {
                        *x += c * gy;
                    }
                }
                if let Some(d) = acc!(s) {
                    d[0] += g.iter().zip(values[x.0].data()).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Act { x, kind } => {
                let (x, kind) = (*x, *kind);
                let xs = values[x.0].data();
                let ys = out.data();
                if let Some(d) = acc!(x) {
                    for j in 0..d.len() {
                        let local = match kind {
                            Activation::Sigmoid => ys[j] * (1.0 - ys[j]),
                            Activation::Tanh => 1.0 - ys[j] * ys[j],
                            Activation::Gelu => gelu_grad(xs[j]),
                            Activation::Relu => {
                                if xs[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        d[j] += g[j] * local;
                    }
                }
            }
            Op::Softmax { x } => {
                let n = *out.shape().last().unwrap();
                if let Some(d) = acc!(*x) {
                    for ((drow, grow), yrow) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.data().chunks_exact(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let dim = values[gamma.0].len();
                let gm = values[gamma.0].data();
                if let Some(d) = acc!(gamma) {
                    for (grow, xrow) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                        for j in 0..dim {
                            d[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if let Some(d) = acc!(beta) {
                    for grow in g.chunks_exact(dim) {
                        add_into(d, grow);
                    }
                }
                if let Some(d) = acc!(x) {
                    let mut dxh = vec![0.0; dim];
                    for (r, ((drow, grow), xrow)) in
                        d.chunks_exact_mut(dim).zip(g.chunks_exact(dim)).zip(xhat.chunks_exact(dim)).enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..dim {
                            dxh[j] = grow[j] * gm[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xrow[j];
                        }
                        m1 /= dim as f64;
                        m2 /= dim as f64;
                        for j in 0..dim {
                            drow[j] += rstd[r] * (dxh[j] - m1 - xrow[j] * m2);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let block = values[p.0].shape()[*axis] * inner;
                    if let Some(d) = acc!(*p) {
                        for o in 0..outer {
                            add_into(&mut d[o * block..(o + 1) * block], &g[o * total + offset..o * total + offset + block]);
                        }
                    }
                    offset += block;
                }
            }
            Op::Transpose { x } => {
                let (c, r) = (out.shape()[0], out.shape()[1]);
                if let Some(d) = acc!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let width = out.len() / idx.len();
                if let Some(d) = acc!(*x) {
                    for (k, &row) in idx.iter().enumerate() {
                        add_into(&mut d[row * width..(row + 1) * width], &g[k * width..(k + 1) * width]);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (x, w, b) = (*x, *w, *b);
                let co = out.shape()[0];
                let ncols = geom.col_cols();
                let krows = geom.col_rows();
                if let Some(d) = acc!(w) {
                    gemm(co, ncols, krows, g, false, cols, true, d, true);
                }
                if let Some(d) = acc!(b) {
                    for (db, row) in d.iter_mut().zip(g.chunks_exact(ncols)) {
                        *db += row.iter().sum::<f64>();
                    }
                }
                if requires[x.0] {
                    let mut dcols = vec![0.0; krows * ncols];
                    gemm(krows, co, ncols, values[w.0].data(), true, g, false, &mut dcols, false);
                    if let Some(d) = acc!(x) {
                        col2im_add(&dcols, geom, d);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(d) = acc!(*x) {
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if let Some(d) = acc!(*x) {
                    let s = g[0] / d.len() as f64;
                    for v in d.iter_mut() {
                        *v += s;
                    }
                }
            }
            Op::SumLast { x } => {
                if let Some(d) = acc!(*x) {
                    let n = d.len() / g.len();
                    for (row, gy) in d.chunks_exact_mut(n).zip(g) {
                        for v in row {
                            *v += gy;
                        }
                    }
                }
            }
            Op::MeanRows { x } => {
                if let Some(d) = acc!(*x) {
                    let width = g.len();
                    let rows = d.len() / width;
                    for row in d.chunks_exact_mut(width) {
                        for (v, gy) in row.iter_mut().zip(g) {
                            *v += gy / rows as f64;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (nq, d) = (out.shape()[0], out.shape()[1]);
                let nk = values[k.0].shape()[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (values[q.0].data(), values[k.0].data(), values[v.0].data());
                let mut qh = vec![0.0; nq * dh];
                let mut kh = vec![0.0; nk * dh];
                let mut vh = vec![0.0; nk * dh];
                let mut gh = vec![0.0; nq * dh];
                let mut dp = vec![0.0; nq * nk];
                let mut tmp_q = vec![0.0; nq * dh];
                let mut tmp_k = vec![0.0; nk * dh];
                for h in 0..heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    copy_cols(qv, d, h * dh, dh, &mut qh);
                    copy_cols(kv, d, h * dh, dh, &mut kh);
                    copy_cols(vv, d, h * dh, dh, &mut vh);
                    copy_cols(g, d, h * dh, dh, &mut gh);
                    if let Some(dv) = acc!(v) {
                        gemm(nk, nq, dh, p, true, &gh, false, &mut tmp_k, false);
                        add_cols(dv, d, h * dh, dh, &tmp_k);
                    }
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√dh scale
                    gemm(nq, dh, nk, &gh, false, &vh, true, &mut dp, false);
                    for (prow, drow) in p.chunks_exact(nk).zip(dp.chunks_exact_mut(nk)) {
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..nk {
                            drow[j] = prow[j] * (drow[j] - dot) * scale;
                        }
                    }
                    if let Some(dq) = acc!(q) {
                        gemm(nq, nk, dh, &dp, false, &kh, false, &mut tmp_q, false);
                        add_cols(dq, d, h * dh, dh, &tmp_q);
                    }
                    if let Some(dk) = acc!(k) {
                        gemm(nk, nq, dh, &dp, true, &qh, false, &mut tmp_k, false);
                        add_cols(dk, d, h * dh, dh, &tmp_k);
                    }
                }
            }
            Op::BceLogits { x, target } => {
                let x = *x;
                let xs = values[x.0].data();
                let n = xs.len() as f64;
                if let Some(d) = acc!(x) {
                    for ((dv, &l), &t) in d.iter_mut().zip(xs).zip(target) {
                        *dv += g[0] * (sigmoid(l) - t) / n;
                    }
                }
            }
        }
    }

    /// Inputs of the node behind `v` (empty for leaves and constants).
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.ops[v.0].inputs()
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn copy_cols(src: &[f64], stride: usize, start: usize, width: usize, dst: &mut [f64]) {
    for (row, out) in src.chunks_exact(stride).zip(dst.chunks_exact_mut(width)) {
        out.copy_from_slice(&row[start..start + width]);
    }
}

fn add_cols(dst: &mut [f64], stride: usize, start: usize, width: usize, src: &[f64]) {
    for (row, s) in dst.chunks_exact_mut(stride).zip(src.chunks_exact(width)) {
        add_into(&mut row[start..start + width], s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2)).unwrap();
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let c = tape.constant(t(&[2, 1], &[5.0, 6.0])).unwrap();
        let y = tape.matmul(m, c).unwrap();
        assert_eq!(tape.value(y).data(), &[17.0, 39.0]);
        let bad = tape.constant(Tensor::zeros(&[3, 1])).unwrap();
        assert!(matches!(tape.matmul(m, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[2f64.ln(), 0.0])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let x = tape.constant(t(&[2], &[1000.0, 0.0])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-15);
        assert!(tape.value(y).data()[1] < 1e-300);
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert!((Activation::Gelu.apply(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!("swish".parse::<Activation>().is_err());
        assert_eq!("gelu".parse::<Activation>().unwrap(), Activation::Gelu);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let x = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 5.0])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        let v = tape.value(y).data();
        // (±1)/sqrt(1 + 1e-5)
        let e = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((v[0] + e).abs() < 1e-15 && (v[1] - e).abs() < 1e-15);
        assert!((v[0] + 1.0).abs() < 1e-5);
        assert_eq!(&v[2..], &[0.0, 0.0]);
        let g0 = tape.constant(Tensor::zeros(&[2])).unwrap();
        let bb = tape.constant(t(&[2], &[0.25, -3.0])).unwrap();
        let y = tape.layer_norm(x, g0, bb).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -3.0, 0.25, -3.0]);
        let g3 = tape.constant(Tensor::ones(&[3])).unwrap();
        assert!(tape.layer_norm(x, g3, b).is_err());
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[1.0]), true).unwrap();
        let b = tape.leaf(t(&[1], &[2.0]), true).unwrap();
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0]);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0]);

        let x = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let y = tape.constant(Tensor::zeros(&[2, 5])).unwrap();
        let z = tape.concat(&[x, y], 1).unwrap();
        assert_eq!(tape.shape(z), &[2, 8]);
        assert!(tape.concat(&[x, y], 0).is_err());
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2], &[1.0, 3.0])).unwrap();
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 6.0]);

        let img: Vec<f64> = (0..2 * 4 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(t(&[2, 4, 4], &img)).unwrap();
        let mut ident = vec![0.0; 2 * 2 * 9];
        ident[4] = 1.0; // out 0 <- in 0 center
        ident[9 + 9 + 9 + 4] = 1.0; // out 1 <- in 1 center
        let k = tape.constant(t(&[2, 2, 3, 3], &ident)).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &img[..]);
        let k_bad = tape.constant(Tensor::zeros(&[2, 3, 3, 3])).unwrap();
        assert!(tape.conv2d(x, k_bad, b, 1).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1.0])).unwrap();
        let z = tape.constant(t(&[1], &[0.0])).unwrap();
        assert!(matches!(tape.div(a, z), Err(Error::NonFinite { op: "div" })));
        assert!(tape.leaf(t(&[1], &[f64::NAN]), true).is_err());
    }

    #[test]
    fn backward_visits_shared_nodes_once() {
        // y = x*x + x, dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3.0, -1.0]), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0, -1.0]);
        // a second backward recomputes rather than accumulating
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn attention_rows_are_simplex_and_mask_falls_back() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(&[3, 4], (0..12).map(|i| (i as f64).cos()).collect()).unwrap()).unwrap();
        let k = tape.constant(Tensor::new(&[5, 4], (0..20).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap()).unwrap();
        let mut blocked = vec![false; 15];
        blocked[0..5].fill(true); // row 0 fully blocked -> falls back
        blocked[5] = true;
        let y = tape.attention(q, k, k, 2, Some(&blocked)).unwrap();
        let p = tape.attention_weights(y).unwrap();
        for row in p.chunks_exact(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!(p[0] > 0.0);
        assert_eq!(p[5], 0.0);
        assert!(tape.attention(q, k, k, 3, None).is_err());
    }
}
