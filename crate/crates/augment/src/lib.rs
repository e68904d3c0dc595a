//! Elastic deformation of text images: fiducial points along the top and
//! bottom edges are pushed left (and, for the curved mode, down) by random
//! per-point offsets, and the image follows through a thin-plate spline.

pub mod dataset;
pub mod fiducial;
pub mod tps;

pub use dataset::{augment_image, build_dataset, build_ladder, AugmentOptions, BuildReport};
pub use fiducial::{displace, make_fiducials, sample_theta, theta_from_mu, FiducialSpec, Mode, Point};
pub use tps::{tps_solve, tps_warp, TpsParams};
