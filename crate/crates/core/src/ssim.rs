//! Structural similarity with a Gaussian window.
//!
//! Local statistics use an 11×11 Gaussian (σ = 1.5) applied separably with
//! half-sample symmetric boundary handling (`d c b a | a b c d | d c b a`).
//! The mean SSIM is the plain average of the full-size SSIM map.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    /// Window side length (odd).
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the images.
    pub l: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            l: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.l).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.l).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::Config(format!("SSIM window must be odd, got {}", self.window)));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.l > 0.0) {
            return Err(Error::Config("SSIM sigma, K1, K2 and L must be positive".into()));
        }
        Ok(())
    }

    /// Normalized 1D Gaussian taps; the 2D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let mut w: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= sum);
        w
    }
}

#[derive(Debug, Clone)]
pub struct SsimResult {
    pub mean: f64,
    pub map: Array2<f64>,
}

/// Index into `0..n` reflected half-sample symmetrically, for any offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn filter_rows(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (taps.len() / 2) as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * img[[y, reflect_index(x as isize + k as isize - r, w)]])
            .sum()
    })
}

fn filter_cols(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (taps.len() / 2) as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * img[[reflect_index(y as isize + k as isize - r, h), x]])
            .sum()
    })
}

fn gaussian(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    filter_cols(&filter_rows(img, taps), taps)
}

fn adjoint_rows(g: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = g.dim();
    let r = (taps.len() / 2) as isize;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = g[[y, x]];
            for (k, t) in taps.iter().enumerate() {
                out[[y, reflect_index(x as isize + k as isize - r, w)]] += t * v;
            }
        }
    }
    out
}

fn adjoint_cols(g: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = g.dim();
    let r = (taps.len() / 2) as isize;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = g[[y, x]];
            for (k, t) in taps.iter().enumerate() {
                out[[reflect_index(y as isize + k as isize - r, h), x]] += t * v;
            }
        }
    }
    out
}

fn gaussian_adjoint(g: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    adjoint_rows(&adjoint_cols(g, taps), taps)
}

struct LocalStats {
    mu_x: Array2<f64>,
    mu_y: Array2<f64>,
    var_x: Array2<f64>,
    var_y: Array2<f64>,
    cov: Array2<f64>,
}

fn local_stats(x: &Array2<f64>, y: &Array2<f64>, taps: &[f64]) -> LocalStats {
    let mu_x = gaussian(x, taps);
    let mu_y = gaussian(y, taps);
    let xx = gaussian(&(x * x), taps);
    let yy = gaussian(&(y * y), taps);
    let xy = gaussian(&(x * y), taps);
    LocalStats {
        var_x: &xx - &(&mu_x * &mu_x),
        var_y: &yy - &(&mu_y * &mu_y),
        cov: &xy - &(&mu_x * &mu_y),
        mu_x,
        mu_y,
    }
}

fn check_shapes(x: (usize, usize), y: (usize, usize)) -> Result<()> {
    if x != y {
        return Err(Error::Shape(format!("SSIM inputs differ: {x:?} vs {y:?}")));
    }
    if x.0 == 0 || x.1 == 0 {
        return Err(Error::Shape("SSIM of an empty image".into()));
    }
    Ok(())
}

/// SSIM map and its mean for two images of equal shape.
pub fn ssim(x: &Array2<f32>, y: &Array2<f32>, p: &SsimParams) -> Result<SsimResult> {
    ssim_f64(&x.mapv(f64::from), &y.mapv(f64::from), p)
}

pub fn ssim_f64(x: &Array2<f64>, y: &Array2<f64>, p: &SsimParams) -> Result<SsimResult> {
    check_shapes(x.dim(), y.dim())?;
    p.validate()?;
    let taps = p.taps();
    let s = local_stats(x, y, &taps);
    let (c1, c2) = (p.c1(), p.c2());
    let map = ndarray::Zip::from(&s.mu_x)
        .and(&s.mu_y)
        .and(&s.var_x)
        .and(&s.var_y)
        .and(&s.cov)
        .map_collect(|&mx, &my, &vx, &vy, &cxy| {
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        });
    let mean = map.mean().expect("non-empty map");
    Ok(SsimResult { mean, map })
}

/// Mean SSIM and its gradient with respect to `x`.
pub fn ssim_grad(x: &Array2<f64>, y: &Array2<f64>, p: &SsimParams) -> Result<(f64, Array2<f64>)> {
    check_shapes(x.dim(), y.dim())?;
    p.validate()?;
    let taps = p.taps();
    let s = local_stats(x, y, &taps);
    let (c1, c2) = (p.c1(), p.c2());
    let n = x.len() as f64;
    let (h, w) = x.dim();

    let mut d_mu = Array2::zeros((h, w));
    let mut d_xx = Array2::zeros((h, w));
    let mut d_xy = Array2::zeros((h, w));
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let (mx, my) = (s.mu_x[[i, j]], s.mu_y[[i, j]]);
            let n1 = 2.0 * mx * my + c1;
            let n2 = 2.0 * s.cov[[i, j]] + c2;
            let d1 = mx * mx + my * my + c1;
            let d2 = s.var_x[[i, j]] + s.var_y[[i, j]] + c2;
            let d = d1 * d2;
            let v = n1 * n2 / d;
            total += v;
            d_mu[[i, j]] = (2.0 * my * (n2 - n1) - v * 2.0 * mx * (d2 - d1)) / d / n;
            d_xx[[i, j]] = -v / d2 / n;
            d_xy[[i, j]] = 2.0 * n1 / d / n;
        }
    }
    let g_mu = gaussian_adjoint(&d_mu, &taps);
    let g_xx = gaussian_adjoint(&d_xx, &taps);
    let g_xy = gaussian_adjoint(&d_xy, &taps);
    let grad = &g_mu + &(&(&g_xx * x) * 2.0) + &(&g_xy * y);
    Ok((total / n, grad))
}
