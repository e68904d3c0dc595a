//! Applying deformations to whole manifests.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textrec_core::io::{GrayImage, Manifest, ManifestEntry};
use textrec_core::{par, Error, Result};

use crate::fiducial::{displace, make_fiducials, sample_theta, Mode, Point, MAX_INTENSITY, MIN_INTENSITY};
use crate::tps::{tps_solve, tps_warp};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const DEFAULT_FIDUCIALS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentOptions {
    pub mode: Mode,
    pub intensity: u32,
    pub n: usize,
    pub seed: u64,
}

impl AugmentOptions {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_INTENSITY..=MAX_INTENSITY).contains(&self.intensity) {
            return Err(Error::Range(format!(
                "intensity {} outside {MIN_INTENSITY}..={MAX_INTENSITY}",
                self.intensity
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("fiducial count N must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub image: GrayImage,
    /// Control points on the padded canvas before and after displacement.
    pub source: Vec<Point>,
    pub moved: Vec<Point>,
    pub thetas: Vec<f64>,
}

/// 64-bit FNV-1a over the seed bytes followed by `key`.
pub fn image_seed(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(key.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Pads the image on the left by `ceil(W/4N)` columns (replicating the first
/// column), displaces every control point by its own draw, and warps.
pub fn augment_image(img: &GrayImage, opts: &AugmentOptions, seed: u64) -> Result<Augmented> {
    opts.validate()?;
    let (w, h) = (img.width, img.height);
    let spec = make_fiducials(w as f64, h as f64, opts.n)?;
    let pad = spec.pad.ceil() as usize;
    let cw = w + pad;
    let mut canvas = Vec::with_capacity(cw * h);
    for y in 0..h {
        canvas.extend(std::iter::repeat_n(img.get(0, y), pad));
        canvas.extend_from_slice(&img.data[y * w..(y + 1) * w]);
    }
    let canvas = GrayImage::new(cw, h, canvas)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source: Vec<Point> = spec
        .points()
        .into_iter()
        .map(|p| Point::new(p.x + pad as f64, p.y))
        .collect();
    let thetas = source
        .iter()
        .map(|_| sample_theta(w as f64, opts.n, opts.intensity, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let moved = source
        .iter()
        .zip(&thetas)
        .map(|(&p, &t)| displace(p, t, opts.mode))
        .collect::<Result<Vec<_>>>()?;
    // Solve the inverse map so every output pixel knows where to sample.
    let backward = tps_solve(&moved, &source)?;
    let image = tps_warp(&canvas, &backward, cw, h)?;
    Ok(Augmented {
        image,
        source,
        moved,
        thetas,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryError {
    pub rel: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildReport {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub errors: Vec<EntryError>,
}

fn load_entry(manifest: &Manifest, entry: &ManifestEntry) -> Result<GrayImage> {
    let path = manifest.resolve(entry);
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if !is_pgm {
        return Err(Error::Format(format!(
            "{}: only binary PGM images are supported",
            path.display()
        )));
    }
    GrayImage::read(&path)
}

/// Writes one deformed copy of every readable entry into `out_dir` together
/// with `manifest.tsv`. Entries that fail are reported and skipped.
pub fn build_dataset(manifest: &Manifest, out_dir: &Path, opts: &AugmentOptions) -> Result<BuildReport> {
    opts.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results = par::map_range(manifest.entries.len(), |i| -> Result<ManifestEntry> {
        let entry = &manifest.entries[i];
        let img = load_entry(manifest, entry)?;
        let out = augment_image(&img, opts, image_seed(opts.seed, &entry.rel))?;
        let rel = format!("{i:05}.pgm");
        out.image.write(&out_dir.join(&rel))?;
        Ok(ManifestEntry {
            rel,
            label: entry.label.clone(),
        })
    });
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (entry, r) in manifest.entries.iter().zip(results) {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => errors.push(EntryError {
                rel: entry.rel.clone(),
                message: e.to_string(),
            }),
        }
    }
    let out = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    let manifest_path = out_dir.join(MANIFEST_NAME);
    out.write(&manifest_path)?;
    Ok(BuildReport {
        manifest: out,
        manifest_path,
        errors,
    })
}

/// Every mode at every intensity, each in its own `ha1`..`ca6` directory.
/// Each image uses the same draw stream at every level.
pub fn build_ladder(manifest: &Manifest, out_dir: &Path, n: usize, seed: u64) -> Result<Vec<(String, BuildReport)>> {
    let mut out = Vec::new();
    for mode in [Mode::Ha, Mode::Ca] {
        for intensity in MIN_INTENSITY..=MAX_INTENSITY {
            let name = format!("{mode}{intensity}");
            let opts = AugmentOptions {
                mode,
                intensity,
                n,
                seed,
            };
            out.push((name.clone(), build_dataset(manifest, &out_dir.join(&name), &opts)?));
        }
    }
    Ok(out)
}
