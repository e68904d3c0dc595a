//! Binary checkpoint: magic, embedded config text, then named f32 tensors.
//! All integers are little-endian `u32`.

use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::recognizer::Recognizer;

pub const MAGIC: &[u8; 5] = b"CDNT1";
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<TensorRecord>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn from_model(config_text: &str, model: &Recognizer<f32>) -> Self {
        let tensors = model
            .params()
            .iter()
            .map(|p| {
                let t = p.tensor();
                TensorRecord {
                    name: p.name().to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                }
            })
            .collect();
        Self {
            config_text: config_text.to_string(),
            tensors,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                put_u32(&mut out, d);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let config_text = r.string("config block")?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("{name}: unsupported dtype tag {dtype}")));
            }
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format(format!("{name}: too large")))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(TensorRecord { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { config_text, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds the model from the embedded config and loads every tensor.
    /// The stored names and shapes must match the model's registry exactly.
    pub fn build_model(&self) -> Result<(Config, Recognizer<f32>)> {
        let config = Config::parse(&self.config_text)?;
        let model = Recognizer::<f32>::new(&config.model)?;
        let store = model.params();
        if store.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors but the model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (p, t) in store.iter().zip(&self.tensors) {
            if p.name() != t.name || p.shape() != t.shape {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} {:?} does not match model parameter {} {:?}",
                    t.name,
                    t.shape,
                    p.name(),
                    p.shape()
                )));
            }
            p.set(t.data.clone())?;
        }
        Ok((config, model))
    }
}
