//! Scene text recogniser with position-queried cross-attention decoding,
//! built on a small reverse-mode autodiff engine.

pub mod ablation;
pub mod config;
pub mod encoder;
pub mod error;
pub mod io;
pub mod mdcdp;
pub mod numerics;
pub mod par;
pub mod recognizer;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
