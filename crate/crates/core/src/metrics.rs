//! Full-reference image quality metrics.

use crate::error::{invalid, Error, Result};
use crate::raster::Raster;
use crate::real::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes<T: Real>(a: &Raster<T>, b: &Raster<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} against {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &Raster<T>, b: &Raster<T>) -> Result<f64> {
    check_shapes(a, b)?;
    if a.data.is_empty() {
        return Err(invalid("empty image"));
    }
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum();
    Ok(s / a.data.len() as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; identical images give
/// `f64::INFINITY`.
pub fn psnr<T: Real>(a: &Raster<T>, b: &Raster<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean local SSIM over every position where the 11x11 Gaussian window
/// fits, averaged over channels (dynamic range 1).
pub fn ssim<T: Real>(a: &Raster<T>, b: &Raster<T>) -> Result<f64> {
    check_shapes(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.height, a.width
        )));
    }
    let ch = a.channels;
    let plane = |r: &Raster<T>, c: usize| -> Vec<f64> { r.data.iter().skip(c).step_by(ch).map(|v| v.f64()).collect() };
    let s: f64 = (0..ch)
        .map(|c| ssim_plane(&plane(a, c), &plane(b, c), a.height, a.width))
        .sum();
    Ok(s / ch as f64)
}
