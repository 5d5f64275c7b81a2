//! Evaluation metrics: PSNR, SSIM and normal mean angular error.

use crate::image_io::Image;
use crate::math::V3;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn mse(a: &Image, b: &Image, mask: Option<&[bool]>) -> Option<f64> {
    assert!(a.same_size(b), "image sizes differ");
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        sum += (x - y).norm_squared();
        n += 3;
    }
    (n > 0).then(|| sum / n as f64)
}

/// `10 log10(1 / MSE)` over all pixels (or masked ones), capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> f64 {
    psnr_masked(a, b, None)
}

pub fn psnr_masked(a: &Image, b: &Image, mask: Option<&[bool]>) -> f64 {
    match mse(a, b, mask) {
        Some(m) if m > 0.0 => (10.0 * (1.0 / m).log10()).min(PSNR_CAP),
        _ => PSNR_CAP,
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur; the window is truncated at the border and
/// renormalized.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, kv) in k.iter().enumerate() {
                    let o = t as isize - r;
                    let (xx, yy) = if horizontal { (x as isize + o, y as isize) } else { (x as isize, y as isize + o) };
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    acc += kv * src[yy as usize * w + xx as usize];
                    norm += kv;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Mean SSIM over pixels and channels, data range 1.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    assert!(a.same_size(b), "image sizes differ");
    let (w, h) = (a.width, a.height);
    let k = gaussian_kernel();
    let c1 = (SSIM_K1).powi(2);
    let c2 = (SSIM_K2).powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = b.data.iter().map(|p| p[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, w, h, &k), blur(&y, w, h, &k));
        let (sxx, syy, sxy) = (blur(&xx, w, h, &k), blur(&yy, w, h, &k), blur(&xy, w, h, &k));
        for i in 0..w * h {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cxy = sxy[i] - mx[i] * my[i];
            total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
    }
    total / (3 * w * h) as f64
}

/// Mean angle in degrees between corresponding unit normals over pixels
/// where both are defined and `mask` is set.
pub fn normal_mae(estimate: &[Option<V3>], truth: &[Option<V3>], mask: Option<&[bool]>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (a, b)) in estimate.iter().zip(truth).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if let (Some(a), Some(b)) = (a, b) {
            sum += a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0).acos().to_degrees();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}
