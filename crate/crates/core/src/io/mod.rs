//! On-disk formats: PGM images, dataset manifests and checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod pgm;

pub use checkpoint::Checkpoint;
pub use manifest::{Manifest, ManifestEntry};
pub use pgm::GrayImage;
