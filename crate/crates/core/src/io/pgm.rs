//! Binary greymap (P5) images with 8-bit samples.

use std::path::Path;

use crate::encoder::TextImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Format(format!(
                "{width}x{height} image cannot hold {} samples",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn to_text_image(&self) -> TextImage {
        TextImage {
            height: self.height,
            width: self.width,
            pixels: self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    pub fn from_text_image(img: &TextImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses a P5 file; `#` comments are allowed in the header and samples
    /// are rescaled to 0..=255 when the maximum value differs.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(Error::Format("not a binary PGM (P5) file".into()));
        }
        let mut num = |what: &str| -> Result<usize> {
            token()?
                .parse()
                .map_err(|_| Error::Format(format!("bad PGM {what}")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maximum value")?;
        if !(1..=255).contains(&maxval) {
            return Err(Error::Format(format!("unsupported PGM maximum value {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let end = start + width * height;
        if end > bytes.len() {
            return Err(Error::Format("truncated PGM raster".into()));
        }
        let data = bytes[start..end]
            .iter()
            .map(|&v| if maxval == 255 { v } else { ((v.min(maxval as u8) as usize * 255 + maxval / 2) / maxval) as u8 })
            .collect();
        Self::new(width, height, data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 250, 255, 7]).unwrap();
        assert_eq!(GrayImage::decode(&img.encode()).unwrap(), img);
    }

    #[test]
    fn header_comments_and_maxval() {
        let bytes = b"P5 # c\n2 1\n# x\n15\n\x0f\x00";
        let img = GrayImage::decode(bytes).unwrap();
        assert_eq!(img.data, vec![255, 0]);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(GrayImage::decode(b"P2\n1 1\n255\n0").is_err());
        assert!(GrayImage::decode(b"P5\n4 4\n255\n\x00").is_err());
    }
}
