//! Learnable building blocks over the tape.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound(vars))
    }
}

/// Parameters of a [`ParamStore`] bound to a tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps tape handles listed in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients for every parameter, zeros where none flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.0
            .iter()
            .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Deterministic per-parameter initializer: each tensor draws from its own
/// ChaCha stream keyed by the parameter name, so adding a parameter never
/// shifts the values of another.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(name_stream(name));
        rng
    }

    pub fn xavier_uniform(&self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = self.rng(name);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-a..a)).collect()).expect("init shape")
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let mut rng = self.rng(name);
        let n = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
        )
        .expect("init shape")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Invalid(format!("{name}: zero-sized linear layer")));
        }
        let wname = format!("{name}.weight");
        let weight = store.add(&wname, init.xavier_uniform(&wname, &[out_dim, in_dim], in_dim, out_dim))?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x · Wᵀ + b` for `x[n × in]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.in_dim {
            return shape_err("linear", format!("{:?} into {}→{}", tape.shape(x), self.in_dim, self.out_dim));
        }
        let y = tape.matmul_t(x, p[self.weight], false, true)?;
        tape.add_bias(y, p[self.bias])
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Invalid(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            dim,
            q_proj: Linear::new(store, init, &format!("{name}.q"), dim, dim)?,
            k_proj: Linear::new(store, init, &format!("{name}.k"), dim, dim)?,
            v_proj: Linear::new(store, init, &format!("{name}.v"), dim, dim)?,
            out_proj: Linear::new(store, init, &format!("{name}.o"), dim, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, q, k, v, None)?.0)
    }

    /// Returns `(output, attention node)`; the attention node exposes the
    /// per-head weights through [`Tape::attention_weights`].
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        p: &Bound,
        q: Var,
        k: Var,
        v: Var,
        blocked: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let qp = self.q_proj.forward(tape, p, q)?;
        let kp = self.k_proj.forward(tape, p, k)?;
        let vp = self.v_proj.forward(tape, p, v)?;
        let attn = tape.attention(qp, kp, vp, self.heads, blocked)?;
        let out = self.out_proj.forward(tape, p, attn)?;
        Ok((out, attn))
    }

    /// Zeroes the value projection and the output bias, which makes the
    /// block output exactly zero for any input.
    pub fn silence(&self, store: &mut ParamStore) {
        self.v_proj.zero(store);
        store.get_mut(self.out_proj.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, init, &format!("{name}.up"), dim, 4 * dim)?,
            down: Linear::new(store, init, &format!("{name}.down"), 4 * dim, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, p, h)
    }
}

/// Two-layer GELU MLP mapping condition embeddings into the decoder space.
#[derive(Clone, Debug)]
pub struct MlpProjector {
    pub first: Linear,
    pub second: Linear,
}

impl MlpProjector {
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, init, &format!("{name}.fc1"), in_dim, hidden)?,
            second: Linear::new(store, init, &format!("{name}.fc2"), hidden, out_dim)?,
        })
    }

    /// `raw[T × D_in] -> [T × d]`.
    pub fn project(&self, tape: &mut Tape, p: &Bound, raw: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, raw)?;
        let h = tape.gelu(h)?;
        self.second.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let kk = kernel * kernel;
        let w = init.xavier_uniform(&wname, &[out_ch, in_ch, kernel, kernel], in_ch * kk, out_ch * kk);
        Ok(Self {
            weight: store.add(&wname, w)?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[out_ch]))?,
            kernel,
            stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], p[self.bias], self.stride)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_examples() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, Init::new(0), "l", 2, 1).unwrap();
        *store.get_mut(lin.weight) = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        *store.get_mut(lin.bias) = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false).unwrap();
        let x = tape.constant(Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap()).unwrap();
        let y = lin.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
        let bad = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(lin.forward(&mut tape, &p, bad).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        Linear::new(&mut store, Init::new(0), "a", 2, 2).unwrap();
        assert!(Linear::new(&mut store, Init::new(0), "a", 2, 2).is_err());
    }

    #[test]
    fn init_is_keyed_by_name() {
        let init = Init::new(7);
        let a = init.xavier_uniform("x", &[4, 4], 4, 4);
        assert_eq!(a, init.xavier_uniform("x", &[4, 4], 4, 4));
        assert_ne!(a, init.xavier_uniform("y", &[4, 4], 4, 4));
        assert_ne!(a, Init::new(8).xavier_uniform("x", &[4, 4], 4, 4));
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, Init::new(0), "m", 6, 4).is_err());
    }
}
