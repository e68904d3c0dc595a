//! Thin-plate spline fitting and backward image warping.

use textrec_core::io::GrayImage;
use textrec_core::{par, Error, Result};

use crate::fiducial::Point;

/// Pivots smaller than this fraction of the largest matrix entry are
/// treated as zero.
const SINGULAR_PIVOT: f64 = 1e-13;
const SNAP: f64 = 1e-6;

/// `U(r) = r² log r²`, written in terms of `r²`.
fn kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// `f(p) = a·[1, x, y] + Σ wᵢ U(|p − cᵢ|)` for each output coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsParams {
    pub centers: Vec<Point>,
    /// Rows give the x and y outputs; columns multiply `[1, x, y]`.
    pub affine: [[f64; 3]; 2],
    pub weights: Vec<[f64; 2]>,
    /// Smallest over largest absolute pivot of the solve.
    pub pivot_ratio: f64,
}

impl TpsParams {
    pub fn identity() -> Self {
        Self {
            centers: Vec::new(),
            affine: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            weights: Vec::new(),
            pivot_ratio: 1.0,
        }
    }

    pub fn map(&self, p: Point) -> Point {
        let [ax, ay] = self.affine;
        let mut x = ax[0] + ax[1] * p.x + ax[2] * p.y;
        let mut y = ay[0] + ay[1] * p.x + ay[2] * p.y;
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let u = kernel((p.x - c.x).powi(2) + (p.y - c.y).powi(2));
            x += w[0] * u;
            y += w[1] * u;
        }
        Point::new(x, y)
    }
}

/// Solves `A·X = B` in place by Gaussian elimination with partial pivoting.
/// `a` is `n×n` row-major; `b` holds `n` rows of `m` right-hand sides.
/// Returns the pivot ratio.
fn gauss_solve(a: &mut [f64], b: &mut [f64], n: usize, m: usize) -> Result<f64> {
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let (mut min_piv, mut max_piv) = (f64::INFINITY, 0.0f64);
    for col in 0..n {
        let piv_row = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("non-empty range");
        let piv = a[piv_row * n + col];
        min_piv = min_piv.min(piv.abs());
        max_piv = max_piv.max(piv.abs());
        // Negated so a NaN pivot is also rejected.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(piv.abs() > SINGULAR_PIVOT * scale) {
            return Err(Error::Numeric(format!(
                "singular thin-plate system: pivot {:.3e} at column {col} against matrix scale {scale:.3e} \
                 (control points collinear or duplicated)",
                piv.abs()
            )));
        }
        if piv_row != col {
            for k in 0..n {
                a.swap(col * n + k, piv_row * n + k);
            }
            for k in 0..m {
                b.swap(col * m + k, piv_row * m + k);
            }
        }
        for r in col + 1..n {
            let f = a[r * n + col] / piv;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            for k in 0..m {
                b[r * m + k] -= f * b[col * m + k];
            }
        }
    }
    for col in (0..n).rev() {
        for k in 0..m {
            let mut s = b[col * m + k];
            for j in col + 1..n {
                s -= a[col * n + j] * b[j * m + k];
            }
            b[col * m + k] = s / a[col * n + col];
        }
    }
    Ok(min_piv / max_piv)
}

/// Fits the spline taking each `src[i]` exactly to `dst[i]`, with kernel
/// weights orthogonal to `{1, x, y}`.
pub fn tps_solve(src: &[Point], dst: &[Point]) -> Result<TpsParams> {
    if src.len() != dst.len() {
        return Err(Error::Config(format!(
            "{} source points but {} targets",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::Config("a thin-plate spline needs at least 3 control points".into()));
    }
    if src.iter().chain(dst).any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::Numeric("non-finite control point".into()));
    }
    let k = src.len();
    let n = k + 3;
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n * 2];
    for i in 0..k {
        for j in 0..k {
            let d2 = (src[i].x - src[j].x).powi(2) + (src[i].y - src[j].y).powi(2);
            a[i * n + j] = kernel(d2);
        }
        for (c, v) in [1.0, src[i].x, src[i].y].into_iter().enumerate() {
            a[i * n + k + c] = v;
            a[(k + c) * n + i] = v;
        }
        b[i * 2] = dst[i].x;
        b[i * 2 + 1] = dst[i].y;
    }
    let pivot_ratio = gauss_solve(&mut a, &mut b, n, 2)?;
    Ok(TpsParams {
        centers: src.to_vec(),
        affine: [
            [b[k * 2], b[(k + 1) * 2], b[(k + 2) * 2]],
            [b[k * 2 + 1], b[(k + 1) * 2 + 1], b[(k + 2) * 2 + 1]],
        ],
        weights: (0..k).map(|i| [b[i * 2], b[i * 2 + 1]]).collect(),
        pivot_ratio,
    })
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

fn sample(img: &GrayImage, x: f64, y: f64) -> f64 {
    let x = snap(x).clamp(0.0, (img.width - 1) as f64);
    let y = snap(y).clamp(0.0, (img.height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (wx, wy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| img.get(xx, yy) as f64;
    let top = at(x0, y0) * (1.0 - wx) + at(x1, y0) * wx;
    let bot = at(x0, y1) * (1.0 - wx) + at(x1, y1) * wx;
    top * (1.0 - wy) + bot * wy
}

/// Backward warp: output pixel `(x, y)` takes the bilinear sample of `image`
/// at `params.map((x, y))`, with coordinates clamped to the border.
pub fn tps_warp(image: &GrayImage, params: &TpsParams, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Config(format!("output size {out_w}x{out_h} must be positive")));
    }
    let mut data = vec![0u8; out_w * out_h];
    par::for_each_chunk_mut(&mut data, out_w, out_w * (params.centers.len() + 8), |y, row| {
        for (x, px) in row.iter_mut().enumerate() {
            let q = params.map(Point::new(x as f64, y as f64));
            *px = sample(image, q.x, q.y).round().clamp(0.0, 255.0) as u8;
        }
    });
    GrayImage::new(out_w, out_h, data)
}
