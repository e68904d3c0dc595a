//! Dense tensors with reverse-mode automatic differentiation, plus the
//! standard layers built on them.

mod nn;
mod ops;
mod scalar;
mod tensor;

pub use nn::{
    linear, scaled_dot_attention, FeedForward, Init, LayerNorm, Linear, Mask, MultiHeadAttention, Param,
    ParamBuilder, ParamStore, Parameter,
};
pub use ops::{LAYER_NORM_EPS, MASK_FILL};
pub use scalar::Scalar;
pub use tensor::{grad_enabled, no_grad, NoGradGuard, Tensor};
