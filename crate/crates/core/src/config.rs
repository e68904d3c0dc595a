//! Flat `key = value` configuration.
//!
//! Keys are dotted by section (`model.e_dim = 64`). Blank lines and lines
//! starting with `#` are ignored. Unknown keys are rejected by name.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which decoder branch queries which feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    /// Position queries semantic (causal).
    PosSem,
    /// Semantic queries position (causal); the swapped-role variant.
    SemPos,
    /// Semantic queries visual.
    SemVis,
    /// Position queries visual (unmasked).
    PosVis,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::PosSem => "p_s",
            Branch::SemPos => "s_p",
            Branch::SemVis => "s_v",
            Branch::PosVis => "p_v",
        }
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "p_s" => Ok(Branch::PosSem),
            "s_p" => Ok(Branch::SemPos),
            "s_v" => Ok(Branch::SemVis),
            "p_v" => Ok(Branch::PosVis),
            other => Err(Error::Config(format!("unknown branch toggle {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Add,
    Dot,
    /// Sigmoid gate whose weights are shared by every decoder layer.
    Dsf,
    /// Sigmoid gate with separate weights per layer.
    DsfUnshared,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Add => "add",
            Fusion::Dot => "dot",
            Fusion::Dsf => "dsf",
            Fusion::DsfUnshared => "dsf_unshared",
        }
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "add" => Ok(Fusion::Add),
            "dot" => Ok(Fusion::Dot),
            "dsf" => Ok(Fusion::Dsf),
            "dsf_unshared" => Ok(Fusion::DsfUnshared),
            other => Err(Error::Config(format!("unknown fusion {other:?}"))),
        }
    }
}

/// Decoder wiring: which branches get a self-attention enhancement block,
/// which cross-branch queries run, and how the two results are fused.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub sae_sem: bool,
    pub sae_vis: bool,
    pub sae_pos: bool,
    pub branches: Vec<Branch>,
    pub fusion: Fusion,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            sae_sem: false,
            sae_vis: false,
            sae_pos: true,
            branches: vec![Branch::PosSem, Branch::PosVis],
            fusion: Fusion::Dsf,
        }
    }
}

impl Variant {
    /// Branches in fusion order: the semantic-side result first.
    pub fn ordered_branches(&self) -> Vec<Branch> {
        let mut b = self.branches.clone();
        b.sort();
        b.dedup();
        b
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ordered_branches().len();
        if n == 0 || n > 2 || n != self.branches.len() {
            return Err(Error::Config(format!(
                "decoder needs one or two distinct branches, got {:?}",
                self.branches
            )));
        }
        Ok(())
    }

    pub fn sae_list(&self) -> String {
        let mut v = Vec::new();
        if self.sae_sem {
            v.push("sem");
        }
        if self.sae_vis {
            v.push("vis");
        }
        if self.sae_pos {
            v.push("pos");
        }
        if v.is_empty() {
            "none".into()
        } else {
            v.join(",")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub e_dim: usize,
    pub heads: usize,
    pub mdcdp_layers: usize,
    /// Maximum decode steps, including the end token.
    pub max_len: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub charset: String,
    pub enc_layers: usize,
    pub enc_ffn: usize,
    pub dec_ffn: usize,
    /// Channel widths of the three stride-2 backbone stages.
    pub backbone: Vec<usize>,
    pub seed: u64,
    pub variant: Variant,
}

impl ModelConfig {
    /// Smallest setting that exercises every mechanism.
    pub fn desk() -> Self {
        Self {
            e_dim: 64,
            heads: 2,
            mdcdp_layers: 3,
            max_len: 25,
            img_h: 16,
            img_w: 64,
            charset: "abcdefghij".into(),
            enc_layers: 3,
            enc_ffn: 128,
            dec_ffn: 64,
            backbone: vec![8, 16, 32],
            seed: 7,
            variant: Variant::default(),
        }
    }

    /// Full-size dimensions (32×128 input, 512 channels, 8 heads).
    pub fn full() -> Self {
        Self {
            e_dim: 512,
            heads: 8,
            mdcdp_layers: 3,
            max_len: 25,
            img_h: 32,
            img_w: 128,
            charset: "0123456789abcdefghijklmnopqrstuvwxyz".into(),
            enc_layers: 3,
            enc_ffn: 1024,
            dec_ffn: 512,
            backbone: vec![64, 128, 256],
            seed: 7,
            variant: Variant::default(),
        }
    }

    pub fn visual_len(&self) -> usize {
        (self.img_h / 8) * (self.img_w / 8)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.e_dim == 0 || !self.e_dim.is_multiple_of(2) {
            return bad(format!("model.e_dim must be even and positive, got {}", self.e_dim));
        }
        if self.heads == 0 || !self.e_dim.is_multiple_of(self.heads) || !(self.e_dim / 2).is_multiple_of(self.heads) {
            return bad(format!(
                "model.heads = {} must divide both e_dim = {} and e_dim/2",
                self.heads, self.e_dim
            ));
        }
        if self.max_len < 2 || self.max_len > self.e_dim {
            return bad(format!(
                "model.max_len = {} must be in 2..=e_dim ({}) so the position index fits",
                self.max_len, self.e_dim
            ));
        }
        if self.img_h == 0 || self.img_w == 0 || !self.img_h.is_multiple_of(8) || !self.img_w.is_multiple_of(8) {
            return bad(format!(
                "image size {}x{} must be positive multiples of 8",
                self.img_h, self.img_w
            ));
        }
        if self.mdcdp_layers == 0 {
            return bad("model.mdcdp_layers must be at least 1".into());
        }
        if self.backbone.len() != 3 || self.backbone.contains(&0) {
            return bad("model.backbone needs three positive stage widths".into());
        }
        if self.enc_ffn == 0 || self.dec_ffn == 0 {
            return bad("feed-forward widths must be positive".into());
        }
        let chars: Vec<char> = self.charset.chars().collect();
        if chars.is_empty() {
            return bad("model.charset is empty".into());
        }
        let mut sorted = chars.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != chars.len() {
            return bad("model.charset repeats a character".into());
        }
        if chars.iter().any(|c| c.is_whitespace() || c.is_control()) {
            return bad("model.charset may not contain whitespace".into());
        }
        self.variant.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub warmup: usize,
    /// Multiplier on the warm-up/inverse-sqrt schedule.
    pub lr_scale: f64,
    /// Model width used by the schedule; 0 means `model.e_dim`.
    pub d_model: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub log_every: usize,
    pub seed: u64,
    pub beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            warmup: 200,
            lr_scale: 0.5,
            d_model: 0,
            finetune_steps: 0,
            finetune_lr: 1e-5,
            log_every: 50,
            seed: 11,
            beam: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub scale: usize,
    pub jitter: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            min_len: 1,
            max_len: 6,
            scale: 2,
            jitter: true,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for key {key}"))),
    }
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl Config {
    /// Parses on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.model.validate()?;
        if cfg.train.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "model.e_dim" => m.e_dim = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.mdcdp_layers" => m.mdcdp_layers = parse(key, v)?,
            "model.max_len" => m.max_len = parse(key, v)?,
            "model.img_h" => m.img_h = parse(key, v)?,
            "model.img_w" => m.img_w = parse(key, v)?,
            "model.charset" => m.charset = v.to_string(),
            "model.enc_layers" => m.enc_layers = parse(key, v)?,
            "model.enc_ffn" => m.enc_ffn = parse(key, v)?,
            "model.dec_ffn" => m.dec_ffn = parse(key, v)?,
            "model.backbone" => m.backbone = parse_list(key, v)?,
            "model.seed" => m.seed = parse(key, v)?,
            "model.sae" => {
                let names: Vec<String> = parse_list(key, v)?;
                m.variant.sae_sem = false;
                m.variant.sae_vis = false;
                m.variant.sae_pos = false;
                for n in names {
                    match n.as_str() {
                        "sem" => m.variant.sae_sem = true,
                        "vis" => m.variant.sae_vis = true,
                        "pos" => m.variant.sae_pos = true,
                        "none" => {}
                        other => return Err(Error::Config(format!("unknown SAE branch {other:?}"))),
                    }
                }
            }
            "model.cbi" => m.variant.branches = parse_list(key, v)?,
            "model.fusion" => m.variant.fusion = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.warmup" => t.warmup = parse(key, v)?,
            "train.lr_scale" => t.lr_scale = parse(key, v)?,
            "train.d_model" => t.d_model = parse(key, v)?,
            "train.finetune_steps" => t.finetune_steps = parse(key, v)?,
            "train.finetune_lr" => t.finetune_lr = parse(key, v)?,
            "train.log_every" => t.log_every = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.beam" => t.beam = parse(key, v)?,
            "synth.samples" => s.samples = parse(key, v)?,
            "synth.min_len" => s.min_len = parse(key, v)?,
            "synth.max_len" => s.max_len = parse(key, v)?,
            "synth.scale" => s.scale = parse(key, v)?,
            "synth.jitter" => s.jitter = parse_bool(key, v)?,
            "synth.seed" => s.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Canonical rendering; parses back to an equal `Config`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("model.e_dim", m.e_dim.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.mdcdp_layers", m.mdcdp_layers.to_string());
        kv("model.max_len", m.max_len.to_string());
        kv("model.img_h", m.img_h.to_string());
        kv("model.img_w", m.img_w.to_string());
        kv("model.charset", m.charset.clone());
        kv("model.enc_layers", m.enc_layers.to_string());
        kv("model.enc_ffn", m.enc_ffn.to_string());
        kv("model.dec_ffn", m.dec_ffn.to_string());
        kv(
            "model.backbone",
            m.backbone.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("model.seed", m.seed.to_string());
        kv("model.sae", m.variant.sae_list());
        kv(
            "model.cbi",
            m.variant.branches.iter().map(|b| b.name()).collect::<Vec<_>>().join(","),
        );
        kv("model.fusion", m.variant.fusion.name().to_string());
        kv("train.steps", t.steps.to_string());
        kv("train.batch", t.batch.to_string());
        kv("train.warmup", t.warmup.to_string());
        kv("train.lr_scale", format!("{:?}", t.lr_scale));
        kv("train.d_model", t.d_model.to_string());
        kv("train.finetune_steps", t.finetune_steps.to_string());
        kv("train.finetune_lr", format!("{:?}", t.finetune_lr));
        kv("train.log_every", t.log_every.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.beam", t.beam.to_string());
        kv("synth.samples", s.samples.to_string());
        kv("synth.min_len", s.min_len.to_string());
        kv("synth.max_len", s.max_len.to_string());
        kv("synth.scale", s.scale.to_string());
        kv("synth.jitter", s.jitter.to_string());
        kv("synth.seed", s.seed.to_string());
        out
    }
}
