//! The three encoder branches: visual features from pixels, semantic features
//! from decoded/label tokens, and content-free position features.

use std::collections::HashMap;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{
    FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, Param, ParamBuilder, Scalar, Tensor,
};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
const FIRST_CHAR: usize = 3;

/// Character table with reserved PAD/START/END ids below the charset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(charset: &str) -> Result<Self> {
        let chars: Vec<char> = charset.chars().collect();
        let mut index = HashMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i + FIRST_CHAR).is_some() {
                return Err(Error::Config(format!("charset repeats {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    /// Total number of classes including the reserved tokens.
    pub fn len(&self) -> usize {
        self.chars.len() + FIRST_CHAR
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn charset(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char(&self, id: usize) -> Option<char> {
        id.checked_sub(FIRST_CHAR).and_then(|i| self.chars.get(i)).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Range(format!("character {c:?} not in charset")))
            })
            .collect()
    }

    /// Characters up to the first END; reserved ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != END)
            .filter_map(|&i| self.char(i))
            .collect()
    }

    /// Ids a decoder may emit: END and every character.
    pub fn emittable(&self) -> impl Iterator<Item = usize> {
        std::iter::once(END).chain(FIRST_CHAR..self.len())
    }
}

/// Grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl TextImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape("image", &[height, width], &[pixels.len()]));
        }
        let pixels = pixels
            .into_iter()
            .map(|p| if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) })
            .collect();
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear resize (pixel-centre aligned).
    pub fn resize(&self, height: usize, width: usize) -> TextImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let top = self.get(y0, x0) * (1.0 - wx) + self.get(y0, x1) * wx;
                let bot = self.get(y1, x0) * (1.0 - wx) + self.get(y1, x1) * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
        TextImage {
            height,
            width,
            pixels: out,
        }
    }
}

/// Stacks images into a channels-last `[N, H, W, 1]` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&TextImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.height != h || im.width != w {
            return Err(Error::shape("image batch", &[h, w], &[im.height, im.width]));
        }
        data.extend(im.pixels.iter().map(|&p| T::of(p as f64)));
    }
    Tensor::new(data, &[images.len(), h, w, 1])
}

/// Sinusoidal table `[len, dim]`: `sin` on even channels, `cos` on odd, with
/// channel pair `k` at frequency `10000^(-2k/dim)`.
pub fn sinusoid<T: Scalar>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoid needs an even width, got {dim}")));
    }
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for c in 0..dim {
            let k = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / dim as f64);
            data.push(T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(data, &[len, dim])
}

/// 3×3 convolution on channels-last images, as patches × weight.
pub struct Conv3x3<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    stride: usize,
}

impl<T: Scalar> Conv3x3<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            weight: pb.param("w", &[9 * c_in, c_out], Init::He { fan_in: 9 * c_in })?,
            bias: pb.param("b", &[c_out], Init::Zeros)?,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let cols = x.im2col(3, self.stride, 1)?;
        crate::numerics::linear(&cols, &self.weight.tensor(), &self.bias.tensor())
    }
}

/// One backbone stage: stride-2 downsampling conv then a residual pair.
pub struct ResStage<T: Scalar> {
    down: Conv3x3<T>,
    conv1: Conv3x3<T>,
    conv2: Conv3x3<T>,
}

impl<T: Scalar> ResStage<T> {
    fn new(pb: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            down: Conv3x3::new(&mut pb, "down", c_in, c_out, 2)?,
            conv1: Conv3x3::new(&mut pb, "conv1", c_out, c_out, 1)?,
            conv2: Conv3x3::new(&mut pb, "conv2", c_out, c_out, 1)?,
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.down.forward(x)?.relu();
        let y = self.conv1.forward(&x)?.relu();
        x.add(&self.conv2.forward(&y)?).map(|s| s.relu())
    }
}

/// Post-norm transformer layer: attention and feed-forward, each followed by
/// residual add and layer norm.
pub struct TransformerLayer<T: Scalar> {
    attn: MultiHeadAttention<T>,
    ln1: LayerNorm<T>,
    ffn: FeedForward<T>,
    ln2: LayerNorm<T>,
}

impl<T: Scalar> TransformerLayer<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, ffn: usize, heads: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            attn: MultiHeadAttention::new(&mut pb, "attn", dim, dim, dim, heads)?,
            ln1: LayerNorm::new(&mut pb, "ln1", dim)?,
            ffn: FeedForward::new(&mut pb, "ffn", dim, ffn)?,
            ln2: LayerNorm::new(&mut pb, "ln2", dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, _) = self.attn.forward(x, x, None)?;
        let x = self.ln1.forward(&x.add(&a)?)?;
        self.ln2.forward(&x.add(&self.ffn.forward(&x)?)?)
    }
}

/// Convolutional backbone (×1/8) + flattened sinusoid + transformer stack.
pub struct VisualEncoder<T: Scalar> {
    stages: Vec<ResStage<T>>,
    proj: Linear<T>,
    layers: Vec<TransformerLayer<T>>,
    e_dim: usize,
}

impl<T: Scalar> VisualEncoder<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut pb = pb.sub("visual");
        let mut stages = Vec::new();
        let mut c_in = 1;
        for (i, &c) in cfg.backbone.iter().enumerate() {
            stages.push(ResStage::new(&mut pb, &format!("stage{i}"), c_in, c)?);
            c_in = c;
        }
        let proj = Linear::new(&mut pb, "proj", c_in, cfg.e_dim)?;
        let layers = (0..cfg.enc_layers)
            .map(|i| TransformerLayer::new(&mut pb, &format!("enc{i}"), cfg.e_dim, cfg.enc_ffn, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            stages,
            proj,
            layers,
            e_dim: cfg.e_dim,
        })
    }

    /// `[N, H, W, 1] -> [N, H·W/64, E]`
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        if images.rank() != 4 || images.dim(3) != 1 {
            return Err(Error::shape("encode_visual", images.shape(), &[0, 0, 0, 1]));
        }
        let (n, h, w) = (images.dim(0), images.dim(1), images.dim(2));
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("image size {h}x{w} is not divisible by 8")));
        }
        let mut x = images.clone();
        for s in &self.stages {
            x = s.forward(&x)?;
        }
        let p = (h / 8) * (w / 8);
        let c = x.dim(3);
        let x = self.proj.forward(&x.reshape(&[n, p, c])?)?;
        let mut x = x.add(&sinusoid::<T>(p, self.e_dim)?)?;
        for l in &self.layers {
            x = l.forward(&x)?;
        }
        Ok(x)
    }
}

/// Learned character embedding table `[V, E]`.
pub struct SemanticEncoder<T: Scalar> {
    pub table: Param<T>,
}

impl<T: Scalar> SemanticEncoder<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, vocab: usize, e_dim: usize) -> Result<Self> {
        let mut pb = pb.sub("semantic");
        Ok(Self {
            table: pb.param(
                "table",
                &[vocab, e_dim],
                Init::Xavier {
                    fan_in: vocab,
                    fan_out: e_dim,
                },
            )?,
        })
    }

    /// Embeds a row-major `[N, L]` id grid.
    pub fn embed(&self, ids: &[usize], n: usize, len: usize) -> Result<Tensor<T>> {
        Tensor::embedding(&self.table.tensor(), ids, &[n, len])
    }
}

/// Teacher-forcing layout `[START, c1..cL, END, PAD..]` of width `len`, one
/// row per label, flattened row-major.
pub fn build_semantic_train(labels: &[Vec<usize>], len: usize) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(labels.len() * len);
    for (i, l) in labels.iter().enumerate() {
        if l.len() + 1 > len {
            return Err(Error::Length(format!(
                "label {i} has {} characters; at most {} fit",
                l.len(),
                len.saturating_sub(1)
            )));
        }
        ids.push(START);
        ids.extend_from_slice(l);
        ids.push(END);
        ids.resize((i + 1) * len, PAD);
    }
    Ok(ids)
}

/// Targets aligned with the teacher-forcing layout: `[c1..cL, END, PAD..]`.
pub fn build_targets(labels: &[Vec<usize>], len: usize) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(labels.len() * len);
    for (i, l) in labels.iter().enumerate() {
        if l.len() + 1 > len {
            return Err(Error::Length(format!("label {i} is longer than {}", len - 1)));
        }
        ids.extend_from_slice(l);
        ids.push(END);
        ids.resize((i + 1) * len, PAD);
    }
    Ok(ids)
}

/// Token history of one inference-time decode: `[START]` grown one id per step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticState {
    ids: Vec<usize>,
}

impl Default for SemanticState {
    fn default() -> Self {
        Self::start()
    }
}

impl SemanticState {
    pub fn start() -> Self {
        Self { ids: vec![START] }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn finished(&self) -> bool {
        self.ids.last() == Some(&END)
    }

    pub fn append(&self, id: usize) -> Result<Self> {
        if self.finished() {
            return Err(Error::State("append after the end token".into()));
        }
        if id == PAD || id == START {
            return Err(Error::State(format!("token {id} cannot be decoded")));
        }
        let mut ids = self.ids.clone();
        ids.push(id);
        Ok(Self { ids })
    }
}

/// Position branch: index code + sinusoid, then Linear→ReLU→Linear.
pub struct PositionEncoder<T: Scalar> {
    mlp1: Linear<T>,
    mlp2: Linear<T>,
    e_dim: usize,
    max_len: usize,
}

impl<T: Scalar> PositionEncoder<T> {
    pub fn new(pb: &mut ParamBuilder<'_, T>, e_dim: usize, max_len: usize) -> Result<Self> {
        if max_len > e_dim {
            return Err(Error::Config(format!(
                "max length {max_len} exceeds width {e_dim}; position index code would not fit"
            )));
        }
        let mut pb = pb.sub("position");
        Ok(Self {
            mlp1: Linear::new(&mut pb, "mlp1", e_dim, e_dim)?,
            mlp2: Linear::new(&mut pb, "mlp2", e_dim, e_dim)?,
            e_dim,
            max_len,
        })
    }

    /// Index code `[N, len, E]`: row `i` holds `values[n]` at channel `i`.
    pub fn index_code(values: &[f64], len: usize, e_dim: usize) -> Result<Tensor<T>> {
        if len > e_dim {
            return Err(Error::Config(format!("{len} positions do not fit in width {e_dim}")));
        }
        let mut data = vec![T::zero(); values.len() * len * e_dim];
        for (n, &v) in values.iter().enumerate() {
            for i in 0..len {
                data[(n * len + i) * e_dim + i] = T::of(v);
            }
        }
        Tensor::new(data, &[values.len(), len, e_dim])
    }

    fn embed(&self, values: &[f64], len: usize) -> Result<Tensor<T>> {
        let x = Self::index_code(values, len, self.e_dim)?.add(&sinusoid::<T>(len, self.e_dim)?)?;
        self.mlp2.forward(&self.mlp1.forward(&x)?.relu())
    }

    /// Training layout: `len` rows per sample, every row carrying `1/L_n`.
    pub fn build_train(&self, lengths: &[usize], len: usize) -> Result<Tensor<T>> {
        if len > self.max_len {
            return Err(Error::Config(format!(
                "{len} positions exceed the maximum of {}",
                self.max_len
            )));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > len) {
            return Err(Error::Length(format!("text length {bad} outside 1..={len}")));
        }
        let values: Vec<f64> = lengths.iter().map(|&l| 1.0 / l as f64).collect();
        self.embed(&values, len)
    }

    /// Inference step `t`: `t` rows carrying `1/t`, repeated for `n` samples.
    pub fn build_infer(&self, t: usize, n: usize) -> Result<Tensor<T>> {
        if t == 0 || t > self.max_len {
            return Err(Error::Length(format!(
                "decode step {t} outside 1..={}",
                self.max_len
            )));
        }
        self.embed(&vec![1.0 / t as f64; n], t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocabulary_reserved_ids() {
        let v = Vocabulary::new("abc").unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.encode("cab").unwrap(), vec![5, 3, 4]);
        assert_eq!(v.decode(&[3, 4, END, 5]), "ab");
        assert!(v.encode("z").is_err());
        assert!(Vocabulary::new("aa").is_err());
        assert_eq!(v.emittable().collect::<Vec<_>>(), vec![2, 3, 4, 5]);
    }

    #[test]
    fn semantic_train_layout() {
        let ids = build_semantic_train(&[vec![3, 4]], 5).unwrap();
        assert_eq!(ids, vec![START, 3, 4, END, PAD]);
        let ids = build_semantic_train(&[vec![]], 4).unwrap();
        assert_eq!(ids, vec![START, END, PAD, PAD]);
        let err = build_semantic_train(&[vec![3], vec![3, 3, 3, 3, 3]], 5).unwrap_err();
        assert!(err.to_string().contains("label 1"));
        assert_eq!(build_targets(&[vec![3, 4]], 5).unwrap(), vec![3, 4, END, PAD, PAD]);
    }

    #[test]
    fn semantic_state_growth() {
        let s = SemanticState::start();
        assert_eq!(s.ids(), &[START]);
        let s = s.append(3).unwrap();
        assert_eq!(s.ids(), &[START, 3]);
        let s = s.append(END).unwrap();
        assert!(s.finished());
        assert_eq!(s.len(), 3);
        assert!(matches!(s.append(4), Err(Error::State(_))));
    }

    #[test]
    fn sinusoid_values() {
        let pe = sinusoid::<f64>(3, 6).unwrap().to_vec_f64();
        assert_eq!(&pe[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe[6] - 1f64.sin()).abs() < 1e-12);
        assert!((pe[6] - 0.8415).abs() < 1e-4);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert!(sinusoid::<f64>(3, 5).is_err());
    }

    #[test]
    fn index_code_values() {
        let code = PositionEncoder::<f64>::index_code(&[0.25], 4, 8).unwrap().to_vec_f64();
        for i in 0..4 {
            for c in 0..8 {
                let want = if c == i { 0.25 } else { 0.0 };
                assert_eq!(code[i * 8 + c], want);
            }
        }
        let one = PositionEncoder::<f64>::index_code(&[1.0], 1, 8).unwrap().to_vec_f64();
        assert_eq!(one[0], 1.0);
        assert!(PositionEncoder::<f64>::index_code(&[1.0], 9, 8).is_err());
    }

    #[test]
    fn position_train_and_infer_agree() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos = PositionEncoder::new(&mut store.builder(&mut rng), 16, 8).unwrap();
        let train = pos.build_train(&[4, 4], 8).unwrap().to_vec_f64();
        let infer = pos.build_infer(4, 1).unwrap().to_vec_f64();
        for (a, b) in infer.iter().zip(&train[..4 * 16]) {
            assert!((a - b).abs() < 1e-6);
        }
        // equal length, different sample slot: identical (content-free)
        assert_eq!(&train[..8 * 16], &train[8 * 16..]);
        assert!(pos.build_infer(9, 1).is_err());
        assert!(pos.build_infer(0, 1).is_err());
    }

    #[test]
    fn visual_shapes() {
        let mut cfg = ModelConfig::desk();
        cfg.e_dim = 64;
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = VisualEncoder::new(&mut store.builder(&mut rng), &cfg).unwrap();
        let img = TextImage::blank(16, 32);
        let x = images_to_tensor::<f32>(&[&img]).unwrap();
        let f = enc.forward(&x).unwrap();
        assert_eq!(f.shape(), &[1, 8, 64]);
        assert!(f.data().iter().all(|v| v.is_finite()));
        let bad = images_to_tensor::<f32>(&[&TextImage::blank(12, 32)]).unwrap();
        assert!(matches!(enc.forward(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn full_size_visual_length() {
        let cfg = ModelConfig::full();
        assert_eq!(cfg.visual_len(), 64);
    }
}
