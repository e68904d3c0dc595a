use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A named trainable tensor. Layers hold `Arc`s to it, so a parameter used at
/// several sites has a single storage and a single gradient accumulator.
pub struct Parameter<T: Scalar> {
    name: String,
    value: RwLock<Tensor<T>>,
}

pub type Param<T> = Arc<Parameter<T>>;

impl<T: Scalar> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Current value as a gradient-tracking leaf.
    pub fn tensor(&self) -> Tensor<T> {
        self.value.read().expect("param lock").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor().shape().to_vec()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.tensor().grad()
    }

    pub fn zero_grad(&self) {
        self.tensor().zero_grad();
    }

    /// Replaces the value with a fresh leaf (gradient cleared).
    pub fn set(&self, data: Vec<T>) -> Result<()> {
        let shape = self.shape();
        let t = Tensor::leaf(data, &shape)?;
        *self.value.write().expect("param lock") = t;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform with bound `sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    /// Uniform with bound `sqrt(6 / fan_in)`.
    He { fan_in: usize },
    Uniform(f64),
}

/// Ordered registry of every parameter in a model.
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<Param<T>> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let p = Arc::new(Parameter {
            name: name.to_string(),
            value: RwLock::new(value.to_leaf()),
        });
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Arc::clone(&p));
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor().numel()).sum()
    }

    pub fn zero_grads(&self) {
        self.params.iter().for_each(|p| p.zero_grad());
    }

    /// Copies values from `other` for every name present in both stores with a
    /// matching shape. Returns how many were copied.
    pub fn copy_from<U: Scalar>(&self, other: &ParamStore<U>) -> Result<usize> {
        let mut n = 0;
        for p in &self.params {
            if let Some(q) = other.get(p.name()) {
                if q.shape() != p.shape() {
                    return Err(Error::shape("copy_from", &p.shape(), &q.shape()));
                }
                p.set(q.tensor().data().iter().map(|v| T::of(v.f64())).collect())?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> ParamBuilder<'a, T> {
        ParamBuilder {
            store: self,
            rng,
            prefix: String::new(),
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<T: Scalar> ParamBuilder<'_, T> {
    pub fn sub(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_, T> {
        let prefix = self.path(name.as_ref());
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Param<T>> {
        let n: usize = shape.iter().product();
        let bound = match init {
            Init::Zeros => None,
            Init::Ones => None,
            Init::Xavier { fan_in, fan_out } => Some((6.0 / (fan_in + fan_out) as f64).sqrt()),
            Init::He { fan_in } => Some((6.0 / fan_in as f64).sqrt()),
            Init::Uniform(b) => Some(b),
        };
        let data: Vec<T> = match (init, bound) {
            (Init::Ones, _) => vec![T::one(); n],
            (_, Some(b)) => (0..n).map(|_| T::of(self.rng.random_range(-b..=b))).collect(),
            _ => vec![T::zero(); n],
        };
        let path = self.path(name);
        self.store.insert(&path, Tensor::new(data, shape)?)
    }
}

/// Affine map over the last axis: `x·W + b` with `W: [in, out]`.
pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            weight: pb.param("w", &[fan_in, fan_out], Init::Xavier { fan_in, fan_out })?,
            bias: pb.param("b", &[fan_out], Init::Zeros)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight.tensor(), &self.bias.tensor())
    }
}

/// `x·W + b` over the last axis of `x`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d_in = *x.shape().last().unwrap_or(&0);
    if w.rank() != 2 || w.dim(0) != d_in || b.shape() != [w.dim(1)] {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let rows = x.numel() / d_in.max(1);
    let y = x.reshape(&[rows, d_in])?.matmul(w)?.add(b)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = w.dim(1);
    y.reshape(&shape)
}

pub struct LayerNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            gamma: pb.param("gamma", &[dim], Init::Ones)?,
            beta: pb.param("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma.tensor(), &self.beta.tensor())
    }
}

/// Two-layer ReLU MLP.
pub struct FeedForward<T: Scalar> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            l1: Linear::new(&mut pb, "l1", dim, hidden)?,
            l2: Linear::new(&mut pb, "l2", hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.l2.forward(&self.l1.forward(x)?.relu())
    }
}

/// Boolean attention mask of `rows × cols` (true = blocked), tiled over any
/// leading batch/head axes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub blocked: Vec<bool>,
}

impl Mask {
    /// Query `i` may see keys `j <= i`.
    pub fn causal(rows: usize, cols: usize) -> Self {
        let blocked = (0..rows * cols).map(|f| f % cols > f / cols).collect();
        Self { rows, cols, blocked }
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.cols + j]
    }
}

/// `softmax(q·kᵀ/√d + mask)·v` over the last two axes. Returns the output and
/// the attention weights.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Mask>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.rank() < 2 || k.rank() < 2 || v.rank() < 2 {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    let (lq, d) = (q.dim(q.rank() - 2), q.dim(q.rank() - 1));
    let lk = k.dim(k.rank() - 2);
    if k.dim(k.rank() - 1) != d {
        return Err(Error::shape("attention q/k", q.shape(), k.shape()));
    }
    if v.dim(v.rank() - 2) != lk {
        return Err(Error::shape("attention k/v", k.shape(), v.shape()));
    }
    if let Some(m) = mask {
        if m.rows != lq || m.cols != lk {
            return Err(Error::shape("attention mask", &[m.rows, m.cols], &[lq, lk]));
        }
    }
    let scores = q
        .matmul(&k.transpose_last()?)?
        .scale(T::one() / T::of(d as f64).sqrt());
    let weights = scores.masked_softmax(mask.map(|m| m.blocked.as_slice()))?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

/// `[N, L, H*dh] -> [N, H, L, dh]`
fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (n, l, c) = (x.dim(0), x.dim(1), x.dim(2));
    x.reshape(&[n, l, heads, c / heads])?.permute(&[0, 2, 1, 3])
}

/// `[N, H, L, dh] -> [N, L, H*dh]`
fn merge_heads<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, l, dh) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    x.permute(&[0, 2, 1, 3])?.reshape(&[n, l, h * dh])
}

/// Multi-head attention with separate query/key/value/output projections.
/// `inner` is the projected width shared by all heads; the output returns to
/// the query width.
pub struct MultiHeadAttention<T: Scalar> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        inner: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !inner.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {inner} not divisible by {heads} heads"
            )));
        }
        let mut pb = pb.sub(name);
        Ok(Self {
            wq: Linear::new(&mut pb, "wq", q_dim, inner)?,
            wk: Linear::new(&mut pb, "wk", kv_dim, inner)?,
            wv: Linear::new(&mut pb, "wv", kv_dim, inner)?,
            wo: Linear::new(&mut pb, "wo", inner, q_dim)?,
            heads,
        })
    }

    /// `query: [N, Lq, Cq]`, `kv: [N or 1, Lk, Ckv]`. Returns the projected
    /// output `[N, Lq, Cq]` and the weights `[N, H, Lq, Lk]`.
    pub fn forward(&self, query: &Tensor<T>, kv: &Tensor<T>, mask: Option<&Mask>) -> Result<(Tensor<T>, Tensor<T>)> {
        if query.rank() != 3 || kv.rank() != 3 {
            return Err(Error::shape("multi_head_attention", query.shape(), kv.shape()));
        }
        let q = split_heads(&self.wq.forward(query)?, self.heads)?;
        let k = split_heads(&self.wk.forward(kv)?, self.heads)?;
        let v = split_heads(&self.wv.forward(kv)?, self.heads)?;
        let (ctx, w) = scaled_dot_attention(&q, &k, &v, mask)?;
        Ok((self.wo.forward(&merge_heads(&ctx)?)?, w))
    }
}
