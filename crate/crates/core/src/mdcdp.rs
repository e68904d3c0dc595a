//! Decoder block: position self-attention enhancement, cross-branch queries
//! into the semantic and visual features, and gated fusion with a gate shared
//! across layers and time steps. Blocks stack, each output becoming the next
//! block's position input.

use std::sync::Arc;

use crate::config::{Branch, Fusion, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::numerics::{FeedForward, Init, LayerNorm, Mask, MultiHeadAttention, Param, ParamBuilder, Scalar, Tensor};

/// Upper-triangular mask: query `i` is blocked from every key `j > i`.
pub type CausalMask = Mask;

pub fn causal_mask(queries: usize, keys: usize) -> CausalMask {
    Mask::causal(queries, keys)
}

/// Attention + residual + layer norm, then feed-forward + residual + layer
/// norm. The query stream carries the residual.
pub struct AttentionBlock<T: Scalar> {
    pub attn: MultiHeadAttention<T>,
    ln1: LayerNorm<T>,
    ffn: FeedForward<T>,
    ln2: LayerNorm<T>,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn new(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        inner: usize,
        ffn: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            attn: MultiHeadAttention::new(&mut pb, "attn", dim, dim, inner, heads)?,
            ln1: LayerNorm::new(&mut pb, "ln1", dim)?,
            ffn: FeedForward::new(&mut pb, "ffn", dim, ffn)?,
            ln2: LayerNorm::new(&mut pb, "ln2", dim)?,
        })
    }

    /// Returns the block output and the attention weights `[N, H, Lq, Lk]`.
    pub fn forward(&self, query: &Tensor<T>, kv: &Tensor<T>, mask: Option<&Mask>) -> Result<(Tensor<T>, Tensor<T>)> {
        if query.rank() != 3 || kv.rank() != 3 || query.dim(2) != kv.dim(2) {
            return Err(Error::shape("attention block", query.shape(), kv.shape()));
        }
        let (a, w) = self.attn.forward(query, kv, mask)?;
        let x = self.ln1.forward(&query.add(&a)?)?;
        let out = self.ln2.forward(&x.add(&self.ffn.forward(&x)?)?)?;
        Ok((out, w))
    }
}

/// Masked self-attention over the position stream at half width.
pub fn sae<T: Scalar>(f_pos: &Tensor<T>, mask: &CausalMask, block: &AttentionBlock<T>) -> Result<Tensor<T>> {
    let l = f_pos.dim(1);
    if mask.rows != l || mask.cols != l {
        return Err(Error::shape("sae mask", &[mask.rows, mask.cols], &[l, l]));
    }
    Ok(block.forward(f_pos, f_pos, Some(mask))?.0)
}

/// Position queries semantic under the causal mask.
pub fn cbi_s<T: Scalar>(
    f_pos: &Tensor<T>,
    f_sem: &Tensor<T>,
    mask: &CausalMask,
    block: &AttentionBlock<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    block.forward(f_pos, f_sem, Some(mask))
}

/// Position queries visual, unmasked.
pub fn cbi_v<T: Scalar>(
    f_pos: &Tensor<T>,
    f_vis: &Tensor<T>,
    block: &AttentionBlock<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    block.forward(f_pos, f_vis, None)
}

/// Fusion gate: `sigmoid([a, b]·W + bias)` with `W: [2C, C]`.
pub struct SharedGate<T: Scalar> {
    pub w_conv: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> SharedGate<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            w_conv: pb.param(
                "w_conv",
                &[2 * channels, channels],
                Init::Xavier {
                    fan_in: 2 * channels,
                    fan_out: channels,
                },
            )?,
            bias: pb.param("bias", &[channels], Init::Zeros)?,
        })
    }

    pub fn gate(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::shape("dsf", a.shape(), b.shape()));
        }
        let cat = Tensor::concat(&[a, b], a.rank() - 1)?;
        Ok(crate::numerics::linear(&cat, &self.w_conv.tensor(), &self.bias.tensor())?.sigmoid())
    }
}

/// `S⊙a + (1−S)⊙b` with `S` from the gate.
pub fn dsf<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, gate: &SharedGate<T>) -> Result<Tensor<T>> {
    let s = gate.gate(a, b)?;
    s.mul(a)?.add(&s.one_minus().mul(b)?)
}

enum Fuse<T: Scalar> {
    Add,
    Dot,
    Gate(Arc<SharedGate<T>>),
}

/// Attention maps kept from one decoder layer for export.
#[derive(Clone, Debug, Default)]
pub struct LayerAttention<T: Scalar> {
    /// Position → visual weights `[N, H, Lq, P]`.
    pub cbi_v: Option<Tensor<T>>,
    /// Position → semantic weights `[N, H, Lq, Ls]`.
    pub cbi_s: Option<Tensor<T>>,
}

/// Inputs shared by every layer of one decoder pass.
pub struct DecoderInputs<'a, T: Scalar> {
    pub f_vis: &'a Tensor<T>,
    pub f_sem: &'a Tensor<T>,
}

/// One decoder block in any of the supported wirings.
pub struct Mdcdp<T: Scalar> {
    sae_pos: Option<AttentionBlock<T>>,
    sae_sem: Option<AttentionBlock<T>>,
    sae_vis: Option<AttentionBlock<T>>,
    branches: Vec<(Branch, AttentionBlock<T>)>,
    fuse: Option<Fuse<T>>,
    index: usize,
}

impl<T: Scalar> Mdcdp<T> {
    pub fn new(
        pb: &mut ParamBuilder<'_, T>,
        index: usize,
        cfg: &ModelConfig,
        shared_gate: Option<&Arc<SharedGate<T>>>,
    ) -> Result<Self> {
        let v: &Variant = &cfg.variant;
        v.validate()?;
        let e = cfg.e_dim;
        let mut pb = pb.sub(format!("mdcdp.{index}"));
        let half = e / 2;
        let sae = |pb: &mut ParamBuilder<'_, T>, name: &str, on: bool| -> Result<Option<AttentionBlock<T>>> {
            on.then(|| AttentionBlock::new(pb, name, e, half, cfg.dec_ffn, cfg.heads))
                .transpose()
        };
        let sae_pos = sae(&mut pb, "sae", v.sae_pos)?;
        let sae_sem = sae(&mut pb, "sae_sem", v.sae_sem)?;
        let sae_vis = sae(&mut pb, "sae_vis", v.sae_vis)?;
        let mut branches = Vec::new();
        for b in v.ordered_branches() {
            let block = AttentionBlock::new(&mut pb, &format!("cbi_{}", b.name()), e, e, cfg.dec_ffn, cfg.heads)?;
            branches.push((b, block));
        }
        let fuse = if branches.len() == 2 {
            Some(match v.fusion {
                Fusion::Add => Fuse::Add,
                Fusion::Dot => Fuse::Dot,
                Fusion::Dsf => Fuse::Gate(Arc::clone(shared_gate.ok_or_else(|| {
                    Error::Config("shared fusion selected but no shared gate supplied".into())
                })?)),
                Fusion::DsfUnshared => Fuse::Gate(Arc::new(SharedGate::new(&mut pb, "dsf", e)?)),
            })
        } else {
            None
        };
        Ok(Self {
            sae_pos,
            sae_sem,
            sae_vis,
            branches,
            fuse,
            index,
        })
    }

    pub fn gate(&self) -> Option<&Arc<SharedGate<T>>> {
        match &self.fuse {
            Some(Fuse::Gate(g)) => Some(g),
            _ => None,
        }
    }

    /// Runs the block on the position stream `f_pos: [N, L, E]`.
    pub fn forward(&self, f_pos: &Tensor<T>, inputs: &DecoderInputs<'_, T>) -> Result<(Tensor<T>, LayerAttention<T>)> {
        let (f_vis, f_sem) = (inputs.f_vis, inputs.f_sem);
        if f_pos.rank() != 3 || f_sem.rank() != 3 || f_vis.rank() != 3 {
            return Err(Error::shape("mdcdp", f_pos.shape(), f_sem.shape()));
        }
        let (lq, ls) = (f_pos.dim(1), f_sem.dim(1));
        let pos_mask = causal_mask(lq, lq);
        let x = match &self.sae_pos {
            Some(b) => sae(f_pos, &pos_mask, b)?,
            None => f_pos.clone(),
        };
        let sem = match &self.sae_sem {
            Some(b) => b.forward(f_sem, f_sem, Some(&causal_mask(ls, ls)))?.0,
            None => f_sem.clone(),
        };
        let vis = match &self.sae_vis {
            Some(b) => b.forward(f_vis, f_vis, None)?.0,
            None => f_vis.clone(),
        };

        let mut attn = LayerAttention::default();
        let mut outs = Vec::with_capacity(2);
        for (branch, block) in &self.branches {
            let out = match branch {
                Branch::PosSem => {
                    let (o, w) = cbi_s(&x, &sem, &causal_mask(lq, ls), block)?;
                    attn.cbi_s = Some(w);
                    o
                }
                Branch::PosVis => {
                    let (o, w) = cbi_v(&x, &vis, block)?;
                    attn.cbi_v = Some(w);
                    o
                }
                Branch::SemPos => block.forward(&sem, &x, Some(&causal_mask(ls, lq)))?.0,
                Branch::SemVis => {
                    let q = if self.index == 0 { &sem } else { &x };
                    block.forward(q, &vis, None)?.0
                }
            };
            outs.push(out);
        }
        let out = match (outs.len(), &self.fuse) {
            (1, _) => outs.pop().expect("one branch"),
            (2, Some(f)) => {
                let (a, b) = (&outs[0], &outs[1]);
                if a.shape() != b.shape() {
                    return Err(Error::shape("fusion", a.shape(), b.shape()));
                }
                match f {
                    Fuse::Add => a.add(b)?,
                    Fuse::Dot => a.mul(b)?,
                    Fuse::Gate(g) => dsf(a, b, g)?,
                }
            }
            _ => return Err(Error::Config("decoder branch/fusion mismatch".into())),
        };
        Ok((out, attn))
    }
}

/// One block: the position stream `f_pos` is enhanced, queries both features,
/// and the two results are fused.
pub fn mdcdp_forward<T: Scalar>(
    f_pos: &Tensor<T>,
    f_vis: &Tensor<T>,
    f_sem: &Tensor<T>,
    block: &Mdcdp<T>,
) -> Result<Tensor<T>> {
    Ok(block.forward(f_pos, &DecoderInputs { f_vis, f_sem })?.0)
}

/// Folds the blocks, each output becoming the next block's position input.
/// Returns the final stream and per-layer attention maps.
pub fn stack_forward<T: Scalar>(
    f_pos: &Tensor<T>,
    f_vis: &Tensor<T>,
    f_sem: &Tensor<T>,
    layers: &[Mdcdp<T>],
) -> Result<(Tensor<T>, Vec<LayerAttention<T>>)> {
    if layers.is_empty() {
        return Err(Error::Config("decoder stack has no layers".into()));
    }
    let inputs = DecoderInputs { f_vis, f_sem };
    let mut x = f_pos.clone();
    let mut maps = Vec::with_capacity(layers.len());
    for l in layers {
        let (y, a) = l.forward(&x, &inputs)?;
        x = y;
        maps.push(a);
    }
    Ok((x, maps))
}
