//! Synthetic labeled image family: one colored shape per image, the class
//! fixing the geometry and everything else (position, size, colors, noise)
//! drawn at random. Colors carry no class information.

use alloc::format;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng::{self, Rng};

pub const SHAPE_NAMES: [&str; 10] =
    ["disk", "square", "triangle", "h-bar", "v-bar", "ring", "cross", "diagonal", "anti-diagonal", "two-dots"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub classes: usize,
    /// Standard deviation of the additive pixel noise before quantization.
    pub noise: f64,
    /// Foreground/background color distance is drawn from `[contrast, 2 contrast]`.
    pub contrast: f64,
    /// Amplitude of the smooth random texture added to the background.
    pub clutter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size: 32, classes: 10, noise: 0.03, contrast: 0.25, clutter: 0.15, seed: 0 }
    }
}

impl SynthConfig {
    pub fn shape(&self) -> Shape {
        Shape { channels: 3, height: self.size, width: self.size }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=SHAPE_NAMES.len()).contains(&self.classes) {
            return Err(Error::Config(format!("synthetic data supports 1 to 10 classes, got {}", self.classes)));
        }
        if self.size < 8 {
            return Err(Error::Config(format!("image size {} too small (minimum 8)", self.size)));
        }
        let finite = [self.noise, self.contrast, self.clutter].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite || self.contrast > 0.4 {
            return Err(Error::Config("noise and clutter must be non-negative and contrast within [0, 0.4]".into()));
        }
        Ok(())
    }
}

/// Whether the point `(u, v)`, in units of the shape radius, lies inside
/// the shape of `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => (-0.8..=0.8).contains(&v) && u.abs() <= 0.9 * (v + 0.8) / 1.6,
        3 => v.abs() <= 0.3 && u.abs() <= 1.0,
        4 => u.abs() <= 0.3 && v.abs() <= 1.0,
        5 => (0.3..=1.0).contains(&r2),
        6 => (u.abs() <= 0.25 && v.abs() <= 1.0) || (v.abs() <= 0.25 && u.abs() <= 1.0),
        7 => (u - v).abs() <= 0.35 && (u + v).abs() <= 1.4,
        8 => (u + v).abs() <= 0.35 && (u - v).abs() <= 1.4,
        _ => (u - 0.55).powi(2) + v * v <= 0.16 || (u + 0.55).powi(2) + v * v <= 0.16,
    }
}

fn color(rng: &mut Rng) -> [f64; 3] {
    [rng::uniform(rng), rng::uniform(rng), rng::uniform(rng)]
}

/// Renders one image of `class` from its own generator.
pub fn render(cfg: &SynthConfig, class: usize, rng: &mut Rng) -> Image {
    let n = cfg.size as f64;
    let radius = n * (0.24 + 0.1 * rng::uniform(rng));
    let cx = n / 2.0 + n * 0.12 * (2.0 * rng::uniform(rng) - 1.0);
    let cy = n / 2.0 + n * 0.12 * (2.0 * rng::uniform(rng) - 1.0);
    let bg = color(rng);
    let fg = loop {
        let dir = [rng::normal(rng), rng::normal(rng), rng::normal(rng)];
        let norm = libm::sqrt(dir.iter().map(|v| v * v).sum::<f64>());
        let dist = cfg.contrast * (1.0 + rng::uniform(rng));
        let c = [bg[0] + dist * dir[0] / norm, bg[1] + dist * dir[1] / norm, bg[2] + dist * dir[2] / norm];
        // Redraw directions that leave the color cube.
        if c.iter().all(|v| (0.0..=1.0).contains(v)) {
            break c;
        }
    };
    const GRID: usize = 4;
    let texture: Vec<f64> = (0..3 * GRID * GRID).map(|_| cfg.clutter * (2.0 * rng::uniform(rng) - 1.0)).collect();
    let smooth = |c: usize, y: f64, x: f64| {
        let g = (GRID - 1) as f64;
        let (fy, fx) = ((y * g).min(g), (x * g).min(g));
        let (y0, x0) = ((fy as usize).min(GRID - 2), (fx as usize).min(GRID - 2));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |yy: usize, xx: usize| texture[(c * GRID + yy) * GRID + xx];
        (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
            + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1))
    };
    let shape = cfg.shape();
    let mut img = Image::zeros(shape);
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in 0..cfg.size {
        for x in 0..cfg.size {
            let mut cover = 0.0;
            for sy in SUB {
                for sx in SUB {
                    let (u, v) = ((x as f64 + sx - cx) / radius, (y as f64 + sy - cy) / radius);
                    cover += if inside(class, u, v) { 0.25 } else { 0.0 };
                }
            }
            for c in 0..3 {
                let back = bg[c] + smooth(c, (y as f64 + 0.5) / n, (x as f64 + 0.5) / n);
                let v = back + cover * (fg[c] - back) + cfg.noise * rng::normal(rng);
                img.set(c, y, x, v as f32);
            }
        }
    }
    img.quantized()
}

/// `n` images with balanced labels (`i mod classes`), each drawn from a seed
/// derived from `(cfg.seed, offset + i)`.
pub fn generate_range(cfg: &SynthConfig, offset: usize, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (offset..offset + n)
        .map(|i| {
            let class = i % cfg.classes;
            let mut rng = rng::rng_from_seed(rng::derive_seed_index(cfg.seed, i as u64));
            Sample::new(class, render(cfg, class, &mut rng))
        })
        .collect::<Vec<_>>();
    Ok(Dataset::new(samples))
}

pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Dataset> {
    generate_range(cfg, 0, n)
}
