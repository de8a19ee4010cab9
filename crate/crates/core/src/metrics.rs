//! Image fidelity metrics on `[0, 1]` images.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), constants
//! `C1 = (0.01)²`, `C2 = (0.03)²` for data range 1, evaluated on the valid
//! region and averaged over channels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check(a: &Image, b: &Image) -> Result<()> {
    if a.shape == b.shape {
        Ok(())
    } else {
        Err(Error::Shape(format!("{} vs {}", a.shape, b.shape)))
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| f64::from(x - y).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m <= 0.0 { PSNR_CAP_DB } else { (10.0 * libm::log10(1.0 / m)).min(PSNR_CAP_DB) })
}

/// Normalized 1-D Gaussian window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-region separable Gaussian filter of an `h × w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let s = a.shape;
    if s.height < SSIM_WINDOW || s.width < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {s}")));
    }
    let k = gaussian_window();
    let hw = s.pixels();
    let mut total = 0.0;
    for c in 0..s.channels {
        let x: Vec<f64> = a.data[c * hw..(c + 1) * hw].iter().map(|&v| f64::from(v)).collect();
        let y: Vec<f64> = b.data[c * hw..(c + 1) * hw].iter().map(|&v| f64::from(v)).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let f = |p: &[f64]| filter(p, s.height, s.width, &k);
        let (mx, my) = (f(&x), f(&y));
        let (exx, eyy, exy) = (f(&prod(&x, &x)), f(&prod(&y, &y)), f(&prod(&x, &y)));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (vx, vy, cxy) = (exx[i] - mx[i] * mx[i], eyy[i] - my[i] * my[i], exy[i] - mx[i] * my[i]);
            acc += ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / s.channels as f64)
}

/// Mean and (population) standard deviation of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: libm::sqrt(var), count: values.len() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;

    fn flat(v: f32) -> Image {
        Image { shape: Shape { channels: 3, height: 16, width: 16 }, data: vec![v; 768] }
    }

    #[test]
    fn identical_images() {
        let a = flat(0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_psnr() {
        let a = flat(100.0 / 255.0);
        let b = flat(108.0 / 255.0);
        assert!((psnr(&a, &b).unwrap() - 30.07).abs() < 0.01);
    }

    #[test]
    fn window_sums_to_one_and_is_symmetric() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[10]);
    }

    #[test]
    fn small_images_are_rejected() {
        let a = Image::zeros(Shape { channels: 1, height: 8, width: 8 });
        assert!(ssim(&a, &a).is_err());
        assert!(psnr(&a, &flat(0.0)).is_err());
    }

    #[test]
    fn summary() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std, s.count), (2.0, 1.0, 2));
    }
}
