use std::fmt;
use std::str::FromStr;

use rand::Rng;
use textrec_core::{Error, Result};

pub const MIN_INTENSITY: u32 = 1;
pub const MAX_INTENSITY: u32 = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Horizontal stretch or curved stretch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Ha,
    Ca,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Ha => "ha",
            Mode::Ca => "ca",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ha" => Ok(Mode::Ha),
            "ca" => Ok(Mode::Ca),
            other => Err(Error::Config(format!("unknown deformation mode {other:?}"))),
        }
    }
}

/// `2(N+1)` control points equally spaced along the top (`y = 0`) and bottom
/// (`y = H`) edges, in unpadded image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FiducialSpec {
    pub n: usize,
    pub width: f64,
    pub height: f64,
    /// Left padding `W / 4N` added to the canvas before warping.
    pub pad: f64,
    pub top: Vec<Point>,
    pub bottom: Vec<Point>,
}

impl FiducialSpec {
    pub fn points(&self) -> Vec<Point> {
        self.top.iter().chain(&self.bottom).copied().collect()
    }

    pub fn padded_width(&self) -> f64 {
        self.width + self.pad
    }
}

pub fn make_fiducials(width: f64, height: f64, n: usize) -> Result<FiducialSpec> {
    if n == 0 {
        return Err(Error::Config("fiducial count N must be positive".into()));
    }
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::Config(format!("image size {width}x{height} must be positive")));
    }
    let xs = (0..=n).map(|i| i as f64 * width / n as f64);
    Ok(FiducialSpec {
        n,
        width,
        height,
        pad: width / (4 * n) as f64,
        top: xs.clone().map(|x| Point::new(x, 0.0)).collect(),
        bottom: xs.map(|x| Point::new(x, height)).collect(),
    })
}

/// Moves a control point by `theta ≤ 0`: horizontally for [`Mode::Ha`], and
/// by `(theta, -theta)` for [`Mode::Ca`].
pub fn displace(p: Point, theta: f64, mode: Mode) -> Result<Point> {
    if theta > 0.0 || theta.is_nan() {
        return Err(Error::Contract(format!("displacement {theta} must be non-positive")));
    }
    Ok(match mode {
        Mode::Ha => Point::new(p.x + theta, p.y),
        Mode::Ca => Point::new(p.x + theta, p.y - theta),
    })
}

fn check_intensity(s: u32) -> Result<()> {
    if !(MIN_INTENSITY..=MAX_INTENSITY).contains(&s) {
        return Err(Error::Range(format!(
            "intensity {s} outside {MIN_INTENSITY}..={MAX_INTENSITY}"
        )));
    }
    Ok(())
}

/// `μ − λ·s` with `λ = max(W/8N, μ)`.
pub fn theta_from_mu(mu: f64, width: f64, n: usize, s: u32) -> Result<f64> {
    check_intensity(s)?;
    let lambda = (width / (8 * n) as f64).max(mu);
    Ok(mu - lambda * s as f64)
}

/// Draws `μ ~ U[0, W/4N]` and returns the displacement. Exactly one value is
/// drawn whatever `s` is, so a fixed stream gives the same `μ` at every level.
pub fn sample_theta<R: Rng>(width: f64, n: usize, s: u32, rng: &mut R) -> Result<f64> {
    check_intensity(s)?;
    if n == 0 {
        return Err(Error::Config("fiducial count N must be positive".into()));
    }
    let mu = rng.random_range(0.0..=width / (4 * n) as f64);
    theta_from_mu(mu, width, n, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fiducial_layout() {
        let f = make_fiducials(100.0, 32.0, 4).unwrap();
        let xs: Vec<f64> = f.top.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 25.0, 50.0, 75.0, 100.0]);
        assert_eq!(f.points().len(), 10);
        assert!(f.bottom.iter().all(|p| p.y == 32.0));
        assert!(make_fiducials(100.0, 32.0, 0).is_err());
    }

    #[test]
    fn displacement_hand_values() {
        assert_eq!(displace(Point::new(50.0, 0.0), -4.0, Mode::Ha).unwrap(), Point::new(46.0, 0.0));
        assert_eq!(displace(Point::new(50.0, 32.0), -4.0, Mode::Ca).unwrap(), Point::new(46.0, 36.0));
        assert!(matches!(displace(Point::new(0.0, 0.0), 0.5, Mode::Ha), Err(Error::Contract(_))));
    }

    #[test]
    fn theta_hand_values() {
        assert!((theta_from_mu(0.0, 128.0, 9, 6).unwrap() + 128.0 / 72.0 * 6.0).abs() < 1e-12);
        assert!((theta_from_mu(2.0, 128.0, 9, 3).unwrap() + 4.0).abs() < 1e-12);
        assert!(matches!(theta_from_mu(0.0, 128.0, 9, 7), Err(Error::Range(_))));
        assert!(matches!(theta_from_mu(0.0, 128.0, 9, 0), Err(Error::Range(_))));
    }

    #[test]
    fn mode_names() {
        assert_eq!("HA".parse::<Mode>().unwrap(), Mode::Ha);
        assert!("xa".parse::<Mode>().is_err());
    }
}
