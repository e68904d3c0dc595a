use std::path::Path;

use textrec_core::config::Config;
use textrec_core::encoder::TextImage;
use textrec_core::io::{Checkpoint, GrayImage, Manifest};
use textrec_core::recognizer::Recognizer;
use textrec_core::{Error, Result};

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => Config::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

pub fn load_image(path: &Path) -> Result<TextImage> {
    Ok(GrayImage::read(path)?.to_text_image())
}

/// Every entry of a manifest with its image; any unreadable entry is fatal.
pub fn load_labeled(path: &Path) -> Result<Vec<(TextImage, String)>> {
    let m = Manifest::read(path)?;
    if m.entries.is_empty() {
        return Err(Error::Config(format!("{}: manifest is empty", path.display())));
    }
    m.entries
        .iter()
        .map(|e| Ok((load_image(&m.resolve(e))?, e.label.clone())))
        .collect()
}

pub fn load_model(path: &Path) -> Result<(Config, Recognizer<f32>)> {
    Checkpoint::read(path)?.build_model()
}
