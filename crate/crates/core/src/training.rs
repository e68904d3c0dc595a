//! Learning-rate schedule, optimiser, training loop and accuracy metrics.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::encoder::{build_targets, TextImage, PAD};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar};
use crate::par;
use crate::recognizer::Recognizer;

/// Warm-up then inverse-square-root decay:
/// `d^-0.5 · min(n^-0.5, n · warm^-1.5)`.
pub fn lr_at(n: usize, warm_n: usize, d_model: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::Range(format!("schedule step {n} must be at least 1")));
    }
    if warm_n < 1 || d_model < 1 {
        return Err(Error::Config(format!(
            "schedule needs positive warm-up and width, got {warm_n} and {d_model}"
        )));
    }
    let n = n as f64;
    let w = warm_n as f64;
    Ok((d_model as f64).powf(-0.5) * n.powf(-0.5).min(n * w.powf(-1.5)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub d_model: usize,
    pub warm_n: usize,
    pub scale: f64,
}

impl LrSchedule {
    pub fn at(&self, n: usize) -> Result<f64> {
        Ok(self.scale * lr_at(n, self.warm_n, self.d_model)?)
    }
}

/// Adaptive-moment optimiser with bias correction.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.tensor().numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies one update from the accumulated gradients; parameters without a
    /// gradient are left untouched.
    pub fn step<T: Scalar>(&mut self, store: &ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::State("optimiser built for a different parameter set".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in store.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let w = p.tensor();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let next: Vec<T> = w
                .data()
                .iter()
                .zip(&g)
                .enumerate()
                .map(|(j, (&w, &g))| {
                    let g = g.f64();
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                    T::of(w.f64() - update)
                })
                .collect();
            p.set(next)?;
        }
        Ok(())
    }
}

pub struct Batch<'a> {
    pub images: Vec<&'a TextImage>,
    pub labels: Vec<Vec<usize>>,
}

fn grad_norms<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut worst: Vec<(f64, &str)> = store
        .iter()
        .filter_map(|p| {
            let g = p.grad()?;
            Some((g.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt(), p.name()))
        })
        .collect();
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    worst
        .iter()
        .take(3)
        .map(|(n, name)| format!("{name}={n:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Teacher-forced loss, backward pass and one optimiser update at `lr`.
/// Rows past each label's END are ignored.
pub fn train_step<T: Scalar>(
    model: &Recognizer<T>,
    batch: &Batch<'_>,
    optimizer: &mut Adam,
    step: usize,
    lr: f64,
) -> Result<f64> {
    let store = model.params();
    store.zero_grads();
    let len = batch.labels.iter().map(|l| l.len() + 1).max().unwrap_or(1);
    let x = model.prepare_images(&batch.images)?;
    let out = model.forward_train_len(&x, &batch.labels, len)?;
    let targets = build_targets(&batch.labels, len)?;
    let loss = out.logits.cross_entropy(&targets, PAD)?;
    let value = loss.item().f64();
    loss.backward()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {value} at step {step} (lr {lr:.3e}); largest gradients: {}",
            grad_norms(store)
        )));
    }
    optimizer.step(store, lr)?;
    store.zero_grads();
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Trains for `cfg.steps` scheduled steps plus `cfg.finetune_steps` at a
/// constant rate. Batches come from seeded per-epoch shuffles of `data`.
/// A CSV line `step,lr,loss` is written every `cfg.log_every` steps.
pub fn train<T: Scalar>(
    model: &Recognizer<T>,
    data: &[(TextImage, Vec<usize>)],
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("train.batch must be positive".into()));
    }
    let schedule = LrSchedule {
        d_model: if cfg.d_model == 0 { model.config().e_dim } else { cfg.d_model },
        warm_n: cfg.warmup,
        scale: cfg.lr_scale,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut optimizer = Adam::new(model.params());
    let mut losses = Vec::with_capacity(cfg.steps + cfg.finetune_steps);
    writeln!(log, "step,lr,loss").map_err(|e| Error::io("log", e))?;
    for n in 1..=cfg.steps + cfg.finetune_steps {
        let lr = if n <= cfg.steps { schedule.at(n)? } else { cfg.finetune_lr };
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let batch = Batch {
            images: idx.iter().map(|&i| &data[i].0).collect(),
            labels: idx.iter().map(|&i| data[i].1.clone()).collect(),
        };
        let loss = train_step(model, &batch, &mut optimizer, n, lr)?;
        losses.push(loss);
        if cfg.log_every > 0 && (n % cfg.log_every == 0 || n == 1) {
            writeln!(log, "{n},{lr:.6e},{loss:.6}").map_err(|e| Error::io("log", e))?;
        }
    }
    Ok(TrainReport {
        final_loss: *losses.last().expect("at least one step"),
        losses,
    })
}

/// Lowercases and drops everything that is not alphanumeric.
pub fn normalize(text: &str) -> String {
    text.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub expected: String,
    pub predicted: String,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub samples: Vec<SampleResult>,
}

/// Exact-match sequence accuracy after [`normalize`], decoding each sample
/// with the given beam width (1 = greedy).
pub fn evaluate<T: Scalar>(model: &Recognizer<T>, data: &[(TextImage, String)], beam: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let predicted = par::map(data, |(img, _)| model.recognize(img, beam));
    let mut samples = Vec::with_capacity(data.len());
    for ((_, label), p) in data.iter().zip(predicted) {
        let predicted = p?;
        samples.push(SampleResult {
            correct: normalize(&predicted) == normalize(label),
            expected: label.clone(),
            predicted,
        });
    }
    let hits = samples.iter().filter(|s| s.correct).count();
    Ok(EvalReport {
        accuracy: hits as f64 / samples.len() as f64,
        samples,
    })
}
