use super::scalar::gemm_rm;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Additive value placed on blocked attention cells before the softmax.
pub const MASK_FILL: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// How an input of `in_shape` is read when broadcast to `out_shape`.
#[derive(Clone)]
enum Bcast {
    Same,
    /// Input repeats every `len` output elements.
    Cycle(usize),
    General(Vec<usize>),
}

impl Bcast {
    fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let in_len: usize = in_shape.iter().product();
        let out_len: usize = out_shape.iter().product();
        if in_shape == out_shape {
            return Bcast::Same;
        }
        let trimmed: Vec<usize> = in_shape.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out_shape.len() && out_shape.ends_with(&trimmed) {
            return Bcast::Cycle(in_len.max(1));
        }
        let rank = out_shape.len();
        let in_strides = strides(in_shape);
        let out_strides = strides(out_shape);
        let offset = rank - in_shape.len();
        let map = (0..out_len)
            .map(|flat| {
                let mut idx = 0;
                for ax in 0..rank {
                    let coord = (flat / out_strides[ax]) % out_shape[ax];
                    if ax >= offset && in_shape[ax - offset] != 1 {
                        idx += coord * in_strides[ax - offset];
                    }
                }
                idx
            })
            .collect();
        Bcast::General(map)
    }

    #[inline]
    fn index(&self, flat: usize) -> usize {
        match self {
            Bcast::Same => flat,
            Bcast::Cycle(n) => flat % n,
            Bcast::General(m) => m[flat],
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn binary(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: fn(T, T) -> T,
        da: fn(T, T) -> T,
        db: fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let shape = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| Error::shape(op, self.shape(), other.shape()))?;
        let n: usize = shape.iter().product();
        let ba = Bcast::new(self.shape(), &shape);
        let bb = Bcast::new(other.shape(), &shape);
        let (ad, bd) = (self.data(), other.data());
        let data: Vec<T> = (0..n).map(|i| f(ad[ba.index(i)], bd[bb.index(i)])).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(shape, data, vec![self.clone(), other.clone()], move |g| {
            let (ad, bd) = (a.data(), b.data());
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![T::zero(); a.numel()];
                for (i, &gi) in g.iter().enumerate() {
                    let (ia, ib) = (ba.index(i), bb.index(i));
                    ga[ia] += gi * da(ad[ia], bd[ib]);
                }
                ga
            });
            let gb = b.requires_grad().then(|| {
                let mut gb = vec![T::zero(); b.numel()];
                for (i, &gi) in g.iter().enumerate() {
                    let (ia, ib) = (ba.index(i), bb.index(i));
                    gb[ib] += gi * db(ad[ia], bd[ib]);
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Elementwise op whose derivative is expressed through input `x` and
    /// output `y`.
    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + Send + Sync + 'static) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = data.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let gx = x
                .data()
                .iter()
                .zip(&y)
                .zip(g)
                .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(|x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Tensor<T> {
        self.unary(|x| T::one() - x, |_, _| -T::one())
    }

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().scale(T::one() / T::of(n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.data().to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", self.shape(), perm));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let out_strides = strides(&out_shape);
        // src[i] = input flat index for output flat index i
        let src: Vec<usize> = (0..self.numel())
            .map(|flat| {
                (0..rank)
                    .map(|ax| ((flat / out_strides[ax]) % out_shape[ax]) * in_strides[perm[ax]])
                    .sum()
            })
            .collect();
        let data = src.iter().map(|&s| self.data()[s]).collect();
        let n = self.numel();
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); n];
            for (i, &s) in src.iter().enumerate() {
                gx[s] = g[i];
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start + len > self.dim(axis) {
            return Err(Error::Range(format!(
                "narrow axis {axis} [{start}, {}) of shape {:?}",
                start + len,
                self.shape()
            )));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let d = self.dim(axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let n = self.numel();
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); n];
            for o in 0..outer {
                let base = (o * d + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rank = first.rank();
        for p in parts {
            let compatible = p.rank() == rank
                && axis < rank
                && (0..rank).all(|i| i == axis || p.dim(i) == first.dim(i));
            if !compatible {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.dim(axis) * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total / inner.max(1);
        let parents: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op(shape, data, parents, move |g| {
            let mut out: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(w * outer)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &w) in out.iter_mut().zip(&widths) {
                    gp.extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            out.into_iter().map(Some).collect()
        }))
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]` with broadcast batch axes.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (ash, bsh) = (self.shape(), other.shape());
        if ash.len() < 2 || bsh.len() < 2 || ash[ash.len() - 1] != bsh[bsh.len() - 2] {
            return Err(Error::shape("matmul", ash, bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = bsh[bsh.len() - 1];
        let (abatch, bbatch) = (&ash[..ash.len() - 2], &bsh[..bsh.len() - 2]);
        let batch = broadcast_shape(abatch, bbatch).ok_or_else(|| Error::shape("matmul", ash, bsh))?;
        let nb: usize = batch.iter().product();
        let amap = Bcast::new(abatch, &batch);
        let bmap = Bcast::new(bbatch, &batch);
        let a_idx: Vec<usize> = (0..nb).map(|i| amap.index(i)).collect();
        let b_idx: Vec<usize> = (0..nb).map(|i| bmap.index(i)).collect();

        let mut out = vec![T::zero(); nb * m * n];
        {
            let (ad, bd) = (self.data(), other.data());
            par::for_each_chunk_mut(&mut out, m * n, m * k * n, |i, c| {
                let a = &ad[a_idx[i] * m * k..(a_idx[i] + 1) * m * k];
                let b = &bd[b_idx[i] * k * n..(b_idx[i] + 1) * k * n];
                gemm_rm(m, k, n, a, false, b, false, c, false);
            });
        }
        let mut shape = batch.clone();
        shape.extend([m, n]);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(shape, out, vec![self.clone(), other.clone()], move |g| {
            let ga = a.requires_grad().then(|| {
                grad_operand(a.numel(), m * k, nb, &a_idx, |i, dst| {
                    // dA = dC · Bᵀ
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &b.data()[b_idx[i] * k * n..(b_idx[i] + 1) * k * n];
                    gemm_rm(m, n, k, gi, false, bi, true, dst, true);
                })
            });
            let gb = b.requires_grad().then(|| {
                grad_operand(b.numel(), k * n, nb, &b_idx, |i, dst| {
                    // dB = Aᵀ · dC
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &a.data()[a_idx[i] * m * k..(a_idx[i] + 1) * m * k];
                    gemm_rm(k, m, n, ai, true, gi, false, dst, true);
                })
            });
            vec![ga, gb]
        }))
    }

    /// Softmax over the last axis. `mask`, when given, has `rows_per_block ×
    /// last` entries (true = blocked) and is tiled over the leading axes.
    /// Blocked cells receive [`MASK_FILL`]; rows with every cell blocked come
    /// out as all zeros.
    pub fn masked_softmax(&self, mask: Option<&[bool]>) -> Result<Tensor<T>> {
        let last = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", self.shape(), &[]))?;
        if last == 0 {
            return Err(Error::shape("softmax", self.shape(), &[1]));
        }
        if let Some(mk) = mask {
            if mk.is_empty() || mk.len() % last != 0 || !self.numel().is_multiple_of(mk.len()) {
                return Err(Error::shape("softmax mask", self.shape(), &[mk.len()]));
            }
        }
        let fill = T::of(MASK_FILL);
        let mut out = vec![T::zero(); self.numel()];
        let x = self.data();
        par::for_each_chunk_mut(&mut out, last, last * 4, |r, row| {
            let xr = &x[r * last..(r + 1) * last];
            let blocked = |j: usize| mask.is_some_and(|mk| mk[(r * last + j) % mk.len()]);
            if (0..last).all(blocked) {
                return;
            }
            let mut mx = T::neg_infinity();
            for j in 0..last {
                let v = if blocked(j) { xr[j] + fill } else { xr[j] };
                row[j] = v;
                mx = mx.max(v);
            }
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        });
        let y = out.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); y.len()];
            par::for_each_chunk_mut(&mut gx, last, last * 3, |r, gr| {
                let yr = &y[r * last..(r + 1) * last];
                let grr = &g[r * last..(r + 1) * last];
                let dot: T = yr.iter().zip(grr).map(|(&a, &b)| a * b).sum();
                for j in 0..last {
                    gr[j] = yr[j] * (grr[j] - dot);
                }
            });
            vec![Some(gx)]
        }))
    }

    pub fn softmax_lastdim(&self) -> Result<Tensor<T>> {
        self.masked_softmax(None)
    }

    /// Layer normalisation over the last axis followed by `gamma * x̂ + beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        let c = *self.shape().last().unwrap_or(&0);
        if c == 0 || gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("layer_norm", self.shape(), gamma.shape()));
        }
        let rows = self.numel() / c;
        let eps = T::of(LAYER_NORM_EPS);
        let cn = T::of(c as f64);
        let mut xhat = vec![T::zero(); self.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let x = self.data();
        for r in 0..rows {
            let xr = &x[r * c..(r + 1) * c];
            let mean = xr.iter().copied().sum::<T>() / cn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                xhat[r * c + j] = (xr[j] - mean) * is;
            }
        }
        let (gd, bd) = (gamma.data(), beta.data());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gd[i % c] + bd[i % c])
            .collect();
        let (xt, gt, bt) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let gd = gt.data();
                let gx = xt.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); xhat.len()];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let dh: Vec<T> = (0..c).map(|j| gr[j] * gd[j]).collect();
                        let sum_dh = dh.iter().copied().sum::<T>();
                        let sum_dh_h: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] = inv_std[r] / cn * (cn * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    gx
                });
                let ggamma = gt.requires_grad().then(|| {
                    let mut gg = vec![T::zero(); c];
                    for (i, (&gi, &h)) in g.iter().zip(&xhat).enumerate() {
                        gg[i % c] += gi * h;
                    }
                    gg
                });
                let gbeta = bt.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); c];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % c] += gi;
                    }
                    gb
                });
                vec![gx, ggamma, gbeta]
            },
        ))
    }

    /// Gathers rows of a `[V, E]` table; output shape is `ids_shape ++ [E]`.
    pub fn embedding(table: &Tensor<T>, ids: &[usize], ids_shape: &[usize]) -> Result<Tensor<T>> {
        if table.rank() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", table.shape(), ids_shape));
        }
        let (v, e) = (table.dim(0), table.dim(1));
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Range(format!("token id {bad} outside vocabulary of {v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(&table.data()[i * e..(i + 1) * e]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(e);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(shape, data, vec![table.clone()], move |g| {
            let mut gt = vec![T::zero(); v * e];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..e {
                    gt[i * e + j] += g[r * e + j];
                }
            }
            vec![Some(gt)]
        }))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(self)` over the
    /// last axis, skipping rows whose target is `ignore_id`.
    pub fn cross_entropy(&self, targets: &[usize], ignore_id: usize) -> Result<Tensor<T>> {
        let v = *self.shape().last().unwrap_or(&0);
        if v == 0 || self.numel() / v != targets.len() {
            return Err(Error::shape("cross_entropy", self.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore_id && t >= v) {
            return Err(Error::Range(format!("target id {bad} outside {v} classes")));
        }
        let x = self.data();
        let mut probs = vec![T::zero(); self.numel()];
        let mut loss = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            let xr = &x[r * v..(r + 1) * v];
            let mx = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = xr.iter().map(|&a| (a - mx).exp()).sum();
            for j in 0..v {
                probs[r * v + j] = (xr[j] - mx).exp() / s;
            }
            if t != ignore_id {
                loss += s.ln() + mx - xr[t];
                count += 1;
            }
        }
        let denom = T::of(count.max(1) as f64);
        let targets = targets.to_vec();
        Ok(Tensor::from_op(vec![], vec![loss / denom], vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); probs.len()];
            for (r, &t) in targets.iter().enumerate() {
                if t == ignore_id {
                    continue;
                }
                for j in 0..v {
                    let onehot = if j == t { T::one() } else { T::zero() };
                    gx[r * v + j] = g[0] * (probs[r * v + j] - onehot) / denom;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Patches of a channels-last `[N, H, W, C]` image for a `k×k` convolution
    /// with zero padding `pad`: output `[N, Ho, Wo, k*k*C]`.
    pub fn im2col(&self, k: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 || stride == 0 || k == 0 {
            return Err(Error::shape("im2col", self.shape(), &[k, stride]));
        }
        let (n, h, w, c) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("im2col", self.shape(), &[k, k]));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let patch = k * k * c;
        // src index per output element, usize::MAX for padding
        let src: Vec<usize> = (0..n * ho * wo * patch)
            .map(|flat| {
                let p = flat % patch;
                let pix = flat / patch;
                let (b, oy, ox) = (pix / (ho * wo), (pix / wo) % ho, pix % wo);
                let (ky, kx, ch) = (p / (k * c), (p / c) % k, p % c);
                let iy = (oy * stride + ky) as isize - pad as isize;
                let ix = (ox * stride + kx) as isize - pad as isize;
                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                    usize::MAX
                } else {
                    ((b * h + iy as usize) * w + ix as usize) * c + ch
                }
            })
            .collect();
        let x = self.data();
        let data = src
            .iter()
            .map(|&s| if s == usize::MAX { T::zero() } else { x[s] })
            .collect();
        let numel = self.numel();
        Ok(Tensor::from_op(vec![n, ho, wo, patch], data, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); numel];
            for (i, &s) in src.iter().enumerate() {
                if s != usize::MAX {
                    gx[s] += g[i];
                }
            }
            vec![Some(gx)]
        }))
    }
}

/// Accumulates per-batch gradient contributions into an operand that may be
/// broadcast. Operands read by exactly one batch entry are filled in parallel.
fn grad_operand<T: Scalar>(
    numel: usize,
    block: usize,
    nb: usize,
    idx: &[usize],
    f: impl Fn(usize, &mut [T]) + Send + Sync,
) -> Vec<T> {
    let mut out = vec![T::zero(); numel];
    if numel == nb * block && idx.iter().enumerate().all(|(i, &j)| i == j) {
        par::for_each_chunk_mut(&mut out, block, block * 8, f);
    } else {
        for i in 0..nb {
            let j = idx[i];
            f(i, &mut out[j * block..(j + 1) * block]);
        }
    }
    out
}
