//! Procedural dot-matrix corpus for desk-scale training.

use rand::Rng;

use crate::config::SynthConfig;
use crate::encoder::TextImage;
use crate::error::{Error, Result};

pub const GLYPH_ROWS: usize = 5;
pub const GLYPH_COLS: usize = 3;
/// Blank pixels between neighbouring glyphs, before scaling.
pub const GLYPH_GAP: usize = 1;

const FOREGROUND: f32 = 1.0;
const BACKGROUND: f32 = 0.0;

/// 5×3 bitmaps, one per character, all distinct. Bit `r * 3 + c` is pixel
/// `(r, c)`. Columns 0 and 2 are always lit somewhere, so every glyph spans
/// its full cell width.
pub fn glyphs(count: usize) -> Vec<u16> {
    let mut out: Vec<u16> = Vec::with_capacity(count);
    let mut state: u32 = 0x9E37_79B9;
    while out.len() < count {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        let g = (state & 0x7FFF) as u16;
        let col = |c: usize| (0..GLYPH_ROWS).any(|r| g >> (r * GLYPH_COLS + c) & 1 == 1);
        let lit = g.count_ones();
        if col(0) && col(2) && (6..=11).contains(&lit) && !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

/// Renders text and samples labels for a fixed charset and canvas.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub charset: Vec<char>,
    pub glyphs: Vec<u16>,
    pub height: usize,
    pub width: usize,
    pub config: SynthConfig,
}

impl SynthSpec {
    pub fn new(charset: &str, height: usize, width: usize, config: &SynthConfig) -> Result<Self> {
        let chars: Vec<char> = charset.chars().collect();
        if chars.is_empty() {
            return Err(Error::Config("synthetic charset is empty".into()));
        }
        if config.scale == 0 || config.min_len == 0 || config.min_len > config.max_len {
            return Err(Error::Config(format!(
                "synthetic lengths {}..={} at scale {} are invalid",
                config.min_len, config.max_len, config.scale
            )));
        }
        let spec = Self {
            glyphs: glyphs(chars.len()),
            charset: chars,
            height,
            width,
            config: config.clone(),
        };
        let need_w = spec.text_width(config.max_len);
        let need_h = GLYPH_ROWS * config.scale;
        if need_w > width || need_h > height {
            return Err(Error::Config(format!(
                "canvas {height}x{width} cannot hold {} glyphs ({need_h}x{need_w} needed)",
                config.max_len
            )));
        }
        Ok(spec)
    }

    fn text_width(&self, len: usize) -> usize {
        let s = self.config.scale;
        if len == 0 {
            0
        } else {
            (len * (GLYPH_COLS + GLYPH_GAP) - GLYPH_GAP) * s
        }
    }

    /// Renders `text` left-aligned at column `x0`, vertically centred.
    pub fn render(&self, text: &str, x0: usize) -> Result<TextImage> {
        let s = self.config.scale;
        let mut img = TextImage::blank(self.height, self.width);
        img.pixels.fill(BACKGROUND);
        let len = text.chars().count();
        if x0 + self.text_width(len) > self.width {
            return Err(Error::Config(format!("text {text:?} does not fit the canvas")));
        }
        let y0 = (self.height - GLYPH_ROWS * s) / 2;
        for (k, ch) in text.chars().enumerate() {
            let idx = self
                .charset
                .iter()
                .position(|&c| c == ch)
                .ok_or_else(|| Error::Config(format!("character {ch:?} not in synthetic charset")))?;
            let g = self.glyphs[idx];
            let gx = x0 + k * (GLYPH_COLS + GLYPH_GAP) * s;
            for r in 0..GLYPH_ROWS {
                for c in 0..GLYPH_COLS {
                    if g >> (r * GLYPH_COLS + c) & 1 == 0 {
                        continue;
                    }
                    for dy in 0..s {
                        for dx in 0..s {
                            img.pixels[(y0 + r * s + dy) * self.width + gx + c * s + dx] = FOREGROUND;
                        }
                    }
                }
            }
        }
        Ok(img)
    }

    /// One random label rendered with optional horizontal jitter.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<(TextImage, String)> {
        let len = rng.random_range(self.config.min_len..=self.config.max_len);
        let label: String = (0..len)
            .map(|_| self.charset[rng.random_range(0..self.charset.len())])
            .collect();
        let slack = self.width - self.text_width(len);
        let x0 = if self.config.jitter { rng.random_range(0..=slack) } else { slack / 2 };
        Ok((self.render(&label, x0)?, label))
    }
}

pub fn synth_sample<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<(TextImage, String)> {
    spec.sample(rng)
}

/// `config.samples` samples drawn from a generator seeded with `config.seed`.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<(TextImage, String)>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.config.seed);
    (0..spec.config.samples).map(|_| spec.sample(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> SynthSpec {
        SynthSpec::new("abcdefghij", 16, 64, &SynthConfig::default()).unwrap()
    }

    #[test]
    fn glyphs_distinct_and_span_cell() {
        let g = glyphs(36);
        for (i, a) in g.iter().enumerate() {
            assert!(g[i + 1..].iter().all(|b| b != a));
            assert!((0..5).any(|r| a >> (r * 3) & 1 == 1));
            assert!((0..5).any(|r| a >> (r * 3 + 2) & 1 == 1));
        }
    }

    #[test]
    fn lengths_in_range_and_deterministic() {
        let s = spec();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (a, la) = s.sample(&mut r1).unwrap();
            let (b, lb) = s.sample(&mut r2).unwrap();
            assert_eq!(la, lb);
            assert_eq!(a, b);
            assert!((1..=6).contains(&la.chars().count()));
        }
    }

    #[test]
    fn distinct_chars_render_distinct() {
        let s = spec();
        let imgs: Vec<_> = s.charset.iter().map(|c| s.render(&c.to_string(), 0).unwrap()).collect();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                assert_ne!(imgs[i], imgs[j]);
            }
        }
    }

    #[test]
    fn canvas_too_small() {
        let cfg = SynthConfig {
            max_len: 20,
            ..SynthConfig::default()
        };
        assert!(matches!(SynthSpec::new("ab", 16, 64, &cfg), Err(Error::Config(_))));
    }
}
