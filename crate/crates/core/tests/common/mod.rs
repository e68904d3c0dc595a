//! Central finite-difference oracle shared by the gradient tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textrec_core::config::ModelConfig;
use textrec_core::encoder::TextImage;
use textrec_core::numerics::{no_grad, Param, Tensor};
use textrec_core::Result;

pub const STEP: f64 = 1e-6;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

pub fn random_leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random_tensor(rng, shape).to_leaf()
}

/// Maps a tensor-valued function to a scalar through fixed random weights so
/// every output element contributes to the checked gradient.
pub struct Projector {
    weights: Vec<f64>,
}

impl Projector {
    pub fn new(seed: u64, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weights: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    pub fn loss(&self, out: &Tensor<f64>) -> Tensor<f64> {
        let w = Tensor::new(self.weights[..out.numel()].to_vec(), out.shape()).unwrap();
        out.mul(&w).unwrap().sum()
    }
}

/// Gradients smaller than this cannot be resolved by differencing at
/// `STEP`; below it the comparison is effectively absolute.
const NORM_FLOOR: f64 = 1e-3;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm.max(NORM_FLOOR)
}

/// Something whose entries can be perturbed: a registered parameter or a
/// free input leaf.
pub enum Slot<'a> {
    Param(&'a Param<f64>),
    Input(usize),
}

/// Worst relative error between backprop and central differences, taken per
/// tensor over at most `max_coords` evenly spaced coordinates.
pub fn check<F>(params: &[Param<f64>], inputs: &[Tensor<f64>], max_coords: usize, f: F) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.to_leaf()).collect();
    for p in params {
        p.zero_grad();
    }
    let loss = f(&leaves).unwrap();
    loss.backward().unwrap();
    let value = |leaves: &[Tensor<f64>]| -> f64 {
        let _g = no_grad();
        f(leaves).unwrap().item()
    };

    let mut worst = 0.0f64;
    let mut slots: Vec<Slot> = params.iter().map(Slot::Param).collect();
    slots.extend((0..leaves.len()).map(Slot::Input));
    for slot in slots {
        let (base, analytic) = match &slot {
            Slot::Param(p) => (p.tensor().data().to_vec(), p.grad().unwrap_or_else(|| vec![0.0; p.tensor().numel()])),
            Slot::Input(i) => (leaves[*i].data().to_vec(), leaves[*i].grad().unwrap_or_else(|| vec![0.0; leaves[*i].numel()])),
        };
        let stride = (base.len() / max_coords).max(1);
        let coords: Vec<usize> = (0..base.len()).step_by(stride).take(max_coords).collect();
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let eval_at = |delta: f64| -> f64 {
                let mut data = base.clone();
                data[c] += delta;
                match &slot {
                    Slot::Param(p) => {
                        p.set(data).unwrap();
                        let v = value(&leaves);
                        p.set(base.clone()).unwrap();
                        v
                    }
                    Slot::Input(i) => {
                        let mut l = leaves.clone();
                        l[*i] = Tensor::new(data, leaves[*i].shape()).unwrap();
                        value(&l)
                    }
                }
            };
            numeric.push((eval_at(STEP) - eval_at(-STEP)) / (2.0 * STEP));
        }
        let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
        let e = rel_err(&picked, &numeric);
        if std::env::var("GRADCHECK_DEBUG").is_ok() {
            let name = match &slot { Slot::Param(p) => p.name().to_string(), Slot::Input(i) => format!("input{i}") };
            eprintln!("{name}: {e:e} a={:?} n={:?}", &picked[..picked.len().min(3)], &numeric[..numeric.len().min(3)]);
        }
        worst = worst.max(e);
    }
    worst
}

/// Small configuration for fast f64 checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        e_dim: 8,
        heads: 2,
        mdcdp_layers: 2,
        max_len: 4,
        img_h: 8,
        img_w: 16,
        charset: "abc".into(),
        enc_layers: 1,
        enc_ffn: 8,
        dec_ffn: 8,
        backbone: vec![2, 2, 4],
        seed: 5,
        ..ModelConfig::desk()
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> TextImage {
    TextImage::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}
