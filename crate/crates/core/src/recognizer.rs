//! End-to-end recogniser: encoder branches, decoder stack and a linear
//! classifier, with teacher-forced training forward and step-wise decoding.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Fusion, ModelConfig};
use crate::encoder::{
    build_semantic_train, images_to_tensor, PositionEncoder, SemanticEncoder, SemanticState, TextImage,
    VisualEncoder, Vocabulary, END,
};
use crate::error::{Error, Result};
use crate::mdcdp::{stack_forward, LayerAttention, Mdcdp, SharedGate};
use crate::numerics::{no_grad, Linear, ParamStore, Scalar, Tensor};

type StepOutput<T> = (Vec<Vec<f64>>, Vec<LayerAttention<T>>);

pub const DEFAULT_BEAM: usize = 10;

pub struct Recognizer<T: Scalar = f32> {
    config: ModelConfig,
    vocab: Vocabulary,
    store: ParamStore<T>,
    visual: VisualEncoder<T>,
    semantic: SemanticEncoder<T>,
    position: PositionEncoder<T>,
    decoder: Vec<Mdcdp<T>>,
    classifier: Linear<T>,
}

/// Output of one teacher-forced pass.
pub struct TrainOutput<T: Scalar> {
    /// `[N, L, V]`
    pub logits: Tensor<T>,
    pub attention: Vec<LayerAttention<T>>,
}

/// Attention captured at one decode step (last decoder layer, heads averaged).
#[derive(Clone, Debug)]
pub struct StepAttention {
    /// Weights over the visual sequence for the current query.
    pub visual: Vec<f64>,
    /// Full `t × t` position→semantic affinity at this step, row-major.
    pub semantic: Vec<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub text: String,
    /// Emitted ids, including the final END when one was produced.
    pub ids: Vec<usize>,
    pub log_prob: f64,
    /// Raw classifier logits at every step.
    pub step_logits: Vec<Vec<f64>>,
    /// Log-probabilities over the full vocabulary at every step.
    pub step_log_probs: Vec<Vec<f64>>,
    pub attention: Vec<StepAttention>,
}

#[derive(Clone, Debug)]
struct Hypothesis {
    ids: Vec<usize>,
    log_prob: f64,
}

impl Hypothesis {
    fn finished(&self) -> bool {
        self.ids.last() == Some(&END)
    }

    /// Higher score first; ties prefer an earlier END, then smaller ids.
    fn rank(&self, other: &Self) -> Ordering {
        other
            .log_prob
            .partial_cmp(&self.log_prob)
            .unwrap_or(Ordering::Equal)
            .then_with(|| end_position(&self.ids).cmp(&end_position(&other.ids)))
            .then_with(|| self.ids.cmp(&other.ids))
    }
}

fn end_position(ids: &[usize]) -> usize {
    ids.iter().position(|&i| i == END).unwrap_or(usize::MAX)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
    row.iter().map(|v| v - lse).collect()
}

impl<T: Scalar> Recognizer<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(&config.charset)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pb = store.builder(&mut rng);
        let visual = VisualEncoder::new(&mut pb, config)?;
        let semantic = SemanticEncoder::new(&mut pb, vocab.len(), config.e_dim)?;
        let position = PositionEncoder::new(&mut pb, config.e_dim, config.max_len)?;
        let shared = match config.variant.fusion {
            Fusion::Dsf if config.variant.branches.len() == 2 => {
                Some(Arc::new(SharedGate::new(&mut pb, "dsf", config.e_dim)?))
            }
            _ => None,
        };
        let decoder = (0..config.mdcdp_layers)
            .map(|i| Mdcdp::new(&mut pb, i, config, shared.as_ref()))
            .collect::<Result<_>>()?;
        let classifier = Linear::new(&mut pb, "classifier", config.e_dim, vocab.len())?;
        Ok(Self {
            config: config.clone(),
            vocab,
            store,
            visual,
            semantic,
            position,
            decoder,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn layers(&self) -> &[Mdcdp<T>] {
        &self.decoder
    }

    /// Resizes to the model's input size and stacks into a batch.
    pub fn prepare_images(&self, images: &[&TextImage]) -> Result<Tensor<T>> {
        let resized: Vec<TextImage> = images
            .iter()
            .map(|im| im.resize(self.config.img_h, self.config.img_w))
            .collect();
        images_to_tensor(&resized.iter().collect::<Vec<_>>())
    }

    pub fn encode_visual(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.visual.forward(images)
    }

    /// Affine map to raw class logits.
    pub fn classify(&self, f_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.classifier.forward(f_out)
    }

    /// Runs the decoder on given feature inputs. `sem_ids` is a row-major
    /// `[N, len]` grid; `pos` the position features `[N, len, E]`.
    fn decode_features(
        &self,
        f_vis: &Tensor<T>,
        sem_ids: &[usize],
        pos: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<LayerAttention<T>>)> {
        let (n, len) = (pos.dim(0), pos.dim(1));
        let f_sem = self.semantic.embed(sem_ids, n, len)?;
        let (f_out, maps) = stack_forward(pos, f_vis, &f_sem, &self.decoder)?;
        Ok((self.classify(&f_out)?, maps))
    }

    /// Teacher-forced logits `[N, T, V]`; position `i` predicts character `i`
    /// and index `len(label)` predicts END.
    pub fn forward_train(&self, images: &Tensor<T>, labels: &[Vec<usize>]) -> Result<Tensor<T>> {
        Ok(self.forward_train_len(images, labels, self.config.max_len)?.logits)
    }

    /// Teacher-forced pass over the first `len` positions only. Every
    /// attention path is causal in the position index, so these logits equal
    /// the first `len` rows of the full-length pass.
    pub fn forward_train_len(&self, images: &Tensor<T>, labels: &[Vec<usize>], len: usize) -> Result<TrainOutput<T>> {
        if images.rank() != 4 || images.dim(0) != labels.len() {
            return Err(Error::shape("forward_train", images.shape(), &[labels.len()]));
        }
        let t = self.config.max_len;
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| l.len() + 1 > t) {
            return Err(Error::Length(format!(
                "label {i} has {} characters; at most {} fit",
                l.len(),
                t - 1
            )));
        }
        if len == 0 || len > t {
            return Err(Error::Length(format!("teacher-forced length {len} outside 1..={t}")));
        }
        let needed = labels.iter().map(|l| l.len() + 1).max().unwrap_or(1);
        let sem_len = len.max(needed);
        let full = build_semantic_train(labels, sem_len)?;
        let sem_ids: Vec<usize> = full
            .chunks(sem_len)
            .flat_map(|row| row[..len].iter().copied())
            .collect();
        let lengths: Vec<usize> = labels.iter().map(|l| l.len() + 1).collect();
        let pos = self.position.build_train(&lengths, len.max(needed))?;
        let pos = if pos.dim(1) == len { pos } else { pos.narrow(1, 0, len)? };
        let f_vis = self.encode_visual(images)?;
        let (logits, attention) = self.decode_features(&f_vis, &sem_ids, &pos)?;
        Ok(TrainOutput { logits, attention })
    }

    /// Next-token logits for each prefix. Every prefix starts with START and
    /// has the same length `t`; `f_vis` has batch 1.
    fn step(&self, f_vis: &Tensor<T>, prefixes: &[Vec<usize>]) -> Result<StepOutput<T>> {
        let n = prefixes.len();
        let t = prefixes[0].len();
        let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let pos = self.position.build_infer(t, n)?;
        let (logits, maps) = self.decode_features(f_vis, &ids, &pos)?;
        let v = self.vocab.len();
        let data = logits.to_vec_f64();
        let rows = (0..n)
            .map(|b| data[(b * t + t - 1) * v..(b * t + t) * v].to_vec())
            .collect();
        Ok((rows, maps))
    }

    fn best_emittable(&self, lp: &[f64]) -> usize {
        let mut best = END;
        for id in self.vocab.emittable() {
            if lp[id] > lp[best] {
                best = id;
            }
        }
        best
    }

    /// Step-wise greedy decoding, stopping at END or after `max_len` steps.
    pub fn decode_greedy(&self, image: &TextImage) -> Result<Decoded> {
        let _guard = no_grad();
        let f_vis = self.encode_visual(&self.prepare_images(&[image])?)?;
        let mut state = SemanticState::start();
        let mut out = Decoded {
            text: String::new(),
            ids: Vec::new(),
            log_prob: 0.0,
            step_logits: Vec::new(),
            step_log_probs: Vec::new(),
            attention: Vec::new(),
        };
        for _ in 0..self.config.max_len {
            let (rows, maps) = self.step(&f_vis, &[state.ids().to_vec()])?;
            let logits = rows.into_iter().next().expect("one row");
            let lp = log_softmax(&logits);
            out.step_logits.push(logits);
            let id = self.best_emittable(&lp);
            out.log_prob += lp[id];
            out.ids.push(id);
            out.attention.push(step_attention(maps.last().expect("layers >= 1"), state.len()));
            out.step_log_probs.push(lp);
            state = state.append(id)?;
            if state.finished() {
                break;
            }
        }
        out.text = self.vocab.decode(&out.ids);
        Ok(out)
    }

    /// Beam search over summed log-probabilities (no length normalisation).
    /// Finished hypotheses stay in the pool unchanged.
    pub fn decode_beam(&self, image: &TextImage, width: usize) -> Result<Decoded> {
        if width < 1 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        let _guard = no_grad();
        let f_vis = self.encode_visual(&self.prepare_images(&[image])?)?;
        let mut beam = vec![Hypothesis {
            ids: Vec::new(),
            log_prob: 0.0,
        }];
        for _ in 0..self.config.max_len {
            let live: Vec<&Hypothesis> = beam.iter().filter(|h| !h.finished()).collect();
            if live.is_empty() {
                break;
            }
            let prefixes: Vec<Vec<usize>> = live
                .iter()
                .map(|h| std::iter::once(crate::encoder::START).chain(h.ids.iter().copied()).collect())
                .collect();
            let (rows, _) = self.step(&f_vis, &prefixes)?;
            let mut pool: Vec<Hypothesis> = beam.iter().filter(|h| h.finished()).cloned().collect();
            for (h, logits) in live.iter().zip(&rows) {
                let lp = log_softmax(logits);
                for id in self.vocab.emittable() {
                    let mut ids = h.ids.clone();
                    ids.push(id);
                    pool.push(Hypothesis {
                        ids,
                        log_prob: h.log_prob + lp[id],
                    });
                }
            }
            pool.sort_by(|a, b| a.rank(b));
            pool.truncate(width);
            beam = pool;
        }
        beam.sort_by(|a, b| a.rank(b));
        let best = beam.into_iter().next().expect("beam never empty");
        Ok(Decoded {
            text: self.vocab.decode(&best.ids),
            ids: best.ids,
            log_prob: best.log_prob,
            step_logits: Vec::new(),
            step_log_probs: Vec::new(),
            attention: Vec::new(),
        })
    }

    /// Beam search with `width = 1` delegates to greedy decoding.
    pub fn recognize(&self, image: &TextImage, width: usize) -> Result<String> {
        if width == 1 {
            Ok(self.decode_greedy(image)?.text)
        } else {
            Ok(self.decode_beam(image, width)?.text)
        }
    }

    /// Log-probability the teacher-forced model assigns to `ids` (characters
    /// optionally followed by END), scoring step `k` on the `k`-token prefix
    /// exactly as step-wise decoding would see it.
    pub fn sequence_log_prob(&self, image: &TextImage, ids: &[usize]) -> Result<f64> {
        let _guard = no_grad();
        let x = self.prepare_images(&[image])?;
        let v = self.vocab.len();
        let mut total = 0.0;
        for k in 0..ids.len() {
            let prefix = ids[..k].to_vec();
            let out = self.forward_train_len(&x, &[prefix], k + 1)?;
            let data = out.logits.to_vec_f64();
            total += log_softmax(&data[k * v..(k + 1) * v])[ids[k]];
        }
        Ok(total)
    }
}

fn step_attention<T: Scalar>(maps: &LayerAttention<T>, t: usize) -> StepAttention {
    let head_mean_last_row = |w: &Tensor<T>| -> Vec<f64> {
        // [1, H, t, K] -> mean over heads of row t-1
        let (h, lq, k) = (w.dim(1), w.dim(2), w.dim(3));
        let d = w.data();
        (0..k)
            .map(|j| (0..h).map(|hh| d[(hh * lq + lq - 1) * k + j].f64()).sum::<f64>() / h as f64)
            .collect()
    };
    let head_mean = |w: &Tensor<T>| -> Vec<f64> {
        let (h, lq, k) = (w.dim(1), w.dim(2), w.dim(3));
        let d = w.data();
        (0..lq * k)
            .map(|i| (0..h).map(|hh| d[hh * lq * k + i].f64()).sum::<f64>() / h as f64)
            .collect()
    };
    StepAttention {
        visual: maps.cbi_v.as_ref().map(head_mean_last_row).unwrap_or_default(),
        semantic: maps.cbi_s.as_ref().map(head_mean).unwrap_or_default(),
        steps: t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            e_dim: 16,
            heads: 2,
            mdcdp_layers: 2,
            max_len: 5,
            img_h: 8,
            img_w: 16,
            charset: "abc".into(),
            enc_layers: 1,
            enc_ffn: 16,
            dec_ffn: 16,
            backbone: vec![2, 4, 4],
            seed: 5,
            ..ModelConfig::desk()
        }
    }

    fn image(seed: usize) -> TextImage {
        let px = (0..8 * 16).map(|i| ((i * 7 + seed * 13) % 11) as f32 / 10.0).collect();
        TextImage::new(8, 16, px).unwrap()
    }

    #[test]
    fn logits_shape() {
        let m = Recognizer::<f64>::new(&tiny()).unwrap();
        let x = m.prepare_images(&[&image(0), &image(1)]).unwrap();
        let logits = m.forward_train(&x, &[vec![3], vec![4, 5]]).unwrap();
        assert_eq!(logits.shape(), &[2, 5, 6]);
        let err = m.forward_train(&x, &[vec![3; 5], vec![]]).unwrap_err();
        assert!(matches!(err, Error::Length(_)));
    }

    #[test]
    fn trimmed_pass_matches_full_prefix() {
        let m = Recognizer::<f64>::new(&tiny()).unwrap();
        let x = m.prepare_images(&[&image(2)]).unwrap();
        let labels = [vec![3, 5]];
        let full = m.forward_train(&x, &labels).unwrap().to_vec_f64();
        let part = m.forward_train_len(&x, &labels, 3).unwrap().logits.to_vec_f64();
        for (a, b) in part.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let m = Recognizer::<f64>::new(&tiny()).unwrap();
        m.classifier.weight.set(vec![0.0; 16 * 6]).unwrap();
        let f = Tensor::<f64>::ones(&[1, 2, 16]);
        let p = m.classify(&f).unwrap().softmax_lastdim().unwrap().to_vec_f64();
        assert!(p.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn always_end_model_stops_immediately() {
        let m = Recognizer::<f64>::new(&tiny()).unwrap();
        m.classifier.weight.set(vec![0.0; 16 * 6]).unwrap();
        let mut b = vec![0.0; 6];
        b[END] = 50.0;
        m.classifier.bias.set(b).unwrap();
        let d = m.decode_greedy(&image(0)).unwrap();
        assert_eq!(d.text, "");
        assert_eq!(d.ids, vec![END]);
        assert_eq!(d.attention.len(), 1);
    }

    #[test]
    fn greedy_terminates_within_max_len() {
        let m = Recognizer::<f64>::new(&tiny()).unwrap();
        let d = m.decode_greedy(&image(3)).unwrap();
        assert!(d.ids.len() <= 5);
    }

    #[test]
    fn beam_width_validated() {
        let m = Recognizer::<f64>::new(&tiny()).unwrap();
        assert!(matches!(m.decode_beam(&image(0), 0), Err(Error::Config(_))));
    }

    #[test]
    fn beam_one_is_greedy() {
        let m = Recognizer::<f64>::new(&tiny()).unwrap();
        for s in 0..4 {
            let g = m.decode_greedy(&image(s)).unwrap();
            let b = m.decode_beam(&image(s), 1).unwrap();
            assert_eq!(g.ids, b.ids);
        }
    }
}
