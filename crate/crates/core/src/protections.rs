//! Simulated black-box protections.
//!
//! Each kind is a fixed, deterministic map built once from a pattern seed:
//! a class-wise sign pattern under an L∞ budget, a class-wise single pixel
//! (L0 = 1), a class-wise low-frequency patch grid under an L2 budget, and a
//! per-image mixture of those. Outputs are delivered on the 8-bit grid, and
//! quantization never moves a value farther from the clean input than the
//! unquantized perturbation did, so budgets hold exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProtectionKind {
    ClasswiseLinf,
    OnePixel,
    PatchL2,
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    L0,
    L2,
    Linf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionSpec {
    pub kind: ProtectionKind,
    /// Budget in pixel-intensity units. For `OnePixel` it is the number of
    /// modified pixel positions and must be 1.
    pub epsilon: f64,
    pub class_count: usize,
    pub pattern_seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mixture_members: Vec<ProtectionSpec>,
}

/// Side length of the patches of [`ProtectionKind::PatchL2`].
pub const PATCH_SIZE: usize = 4;

/// Side length of the constant-sign cells of [`ProtectionKind::ClasswiseLinf`].
pub const SIGN_CELL: usize = 2;

impl ProtectionSpec {
    pub fn classwise_linf(epsilon: f64, class_count: usize, pattern_seed: u64) -> Self {
        Self { kind: ProtectionKind::ClasswiseLinf, epsilon, class_count, pattern_seed, mixture_members: Vec::new() }
    }

    pub fn one_pixel(class_count: usize, pattern_seed: u64) -> Self {
        Self { kind: ProtectionKind::OnePixel, epsilon: 1.0, class_count, pattern_seed, mixture_members: Vec::new() }
    }

    pub fn patch_l2(epsilon: f64, class_count: usize, pattern_seed: u64) -> Self {
        Self { kind: ProtectionKind::PatchL2, epsilon, class_count, pattern_seed, mixture_members: Vec::new() }
    }

    /// L2 budget whose per-pixel RMS equals `8/255` on images of `shape`.
    pub fn default_l2_epsilon(shape: Shape) -> f64 {
        8.0 / 255.0 * libm::sqrt(shape.len() as f64)
    }

    /// Mixture of the three single-mechanism kinds with default budgets.
    pub fn default_mixture(shape: Shape, class_count: usize, pattern_seed: u64) -> Self {
        let members = alloc::vec![
            Self::classwise_linf(8.0 / 255.0, class_count, rng::derive_seed(pattern_seed, "linf")),
            Self::one_pixel(class_count, rng::derive_seed(pattern_seed, "pixel")),
            Self::patch_l2(Self::default_l2_epsilon(shape), class_count, rng::derive_seed(pattern_seed, "patch")),
        ];
        Self::mixture(members, pattern_seed)
    }

    pub fn mixture(members: Vec<ProtectionSpec>, pattern_seed: u64) -> Self {
        let class_count = members.iter().map(|m| m.class_count).max().unwrap_or(0);
        Self { kind: ProtectionKind::Mixture, epsilon: 0.0, class_count, pattern_seed, mixture_members: members }
    }

    pub fn norm(&self) -> Option<Norm> {
        match self.kind {
            ProtectionKind::ClasswiseLinf => Some(Norm::Linf),
            ProtectionKind::OnePixel => Some(Norm::L0),
            ProtectionKind::PatchL2 => Some(Norm::L2),
            ProtectionKind::Mixture => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::Config("protection needs at least one class".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!("budget {} must be finite and non-negative", self.epsilon)));
        }
        match self.kind {
            ProtectionKind::OnePixel if self.epsilon != 1.0 => {
                Err(Error::Config("one-pixel protection modifies exactly one pixel (epsilon = 1)".into()))
            }
            ProtectionKind::Mixture if self.mixture_members.is_empty() => {
                Err(Error::Config("mixture needs at least one member".into()))
            }
            ProtectionKind::Mixture => self.mixture_members.iter().try_for_each(Self::validate),
            _ if !self.mixture_members.is_empty() => Err(Error::Config("only mixtures take members".into())),
            _ => Ok(()),
        }
    }

    /// Canonical one-line description; stable across runs.
    pub fn describe(&self) -> String {
        let mut s = format!("{:?}(eps={:.9},classes={},seed={})", self.kind, self.epsilon, self.class_count, self.pattern_seed);
        if !self.mixture_members.is_empty() {
            s.push('[');
            for (i, m) in self.mixture_members.iter().enumerate() {
                if i > 0 {
                    s.push(';');
                }
                s.push_str(&m.describe());
            }
            s.push(']');
        }
        s
    }

    /// Short stable identifier used to tag pair archives.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.describe().as_bytes());
        let kind = match self.kind {
            ProtectionKind::ClasswiseLinf => "linf",
            ProtectionKind::OnePixel => "pixel",
            ProtectionKind::PatchL2 => "patch",
            ProtectionKind::Mixture => "mix",
        };
        format!("{kind}-{}", hex::encode(&digest[..6]))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Mechanism {
    /// Per-class perturbation (already scaled to the budget), CHW layout.
    Additive(Vec<Vec<f32>>),
    /// Per-class pixel position and color.
    Pixel(Vec<(usize, usize, Vec<f32>)>),
    Mixture(Vec<Protector>),
}

/// A protection with its per-class patterns frozen for a given image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Protector {
    spec: ProtectionSpec,
    shape: Shape,
    mechanism: Mechanism,
}

impl Protector {
    pub fn new(spec: &ProtectionSpec, shape: Shape) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::rng_from_seed(spec.pattern_seed);
        let mechanism = match spec.kind {
            ProtectionKind::ClasswiseLinf => {
                let eps = f64::from(spec.epsilon as f32);
                let cell = SIGN_CELL;
                Mechanism::Additive(
                    (0..spec.class_count)
                        .map(|_| {
                            let cells = cell_values(shape, cell, || if rng::below(&mut rng, 2) == 0 { -eps } else { eps });
                            expand_cells(shape, cell, &cells).into_iter().map(|v| v as f32).collect()
                        })
                        .collect(),
                )
            }
            ProtectionKind::PatchL2 => {
                let patterns = (0..spec.class_count)
                    .map(|_| {
                        let mut cells = cell_values(shape, PATCH_SIZE, || 2.0 * rng::uniform(&mut rng) - 1.0);
                        // Zero mean per channel, so the pattern is not confused with a color shift.
                        let per = cells.len() / shape.channels;
                        for ch in cells.chunks_mut(per) {
                            let m = ch.iter().sum::<f64>() / per as f64;
                            ch.iter_mut().for_each(|v| *v -= m);
                        }
                        let p = expand_cells(shape, PATCH_SIZE, &cells);
                        let norm = libm::sqrt(p.iter().map(|v| v * v).sum::<f64>());
                        let scale = if norm > 0.0 { spec.epsilon / norm } else { 0.0 };
                        // Shrink by a hair so f32 storage cannot push the norm past the budget.
                        p.iter().map(|v| (v * scale * (1.0 - 1e-6)) as f32).collect()
                    })
                    .collect();
                Mechanism::Additive(patterns)
            }
            ProtectionKind::OnePixel => Mechanism::Pixel(
                (0..spec.class_count)
                    .map(|_| {
                        let y = rng::below(&mut rng, shape.height);
                        let x = rng::below(&mut rng, shape.width);
                        let color = (0..shape.channels).map(|_| rng::below(&mut rng, 2) as f32).collect();
                        (y, x, color)
                    })
                    .collect(),
            ),
            ProtectionKind::Mixture => {
                Mechanism::Mixture(spec.mixture_members.iter().map(|m| Protector::new(m, shape)).collect::<Result<_>>()?)
            }
        };
        Ok(Self { spec: spec.clone(), shape, mechanism })
    }

    pub fn spec(&self) -> &ProtectionSpec {
        &self.spec
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Index of the mixture member that handles an image with this id.
    pub fn mixture_member(&self, id: &str) -> Option<usize> {
        match &self.mechanism {
            Mechanism::Mixture(members) => Some((rng::derive_seed(self.spec.pattern_seed, id) % members.len() as u64) as usize),
            _ => None,
        }
    }

    pub fn protect(&self, x: &Image, label: usize) -> Result<Image> {
        if x.shape != self.shape {
            return Err(Error::Shape(format!("protector built for {}, got {}", self.shape, x.shape)));
        }
        if label >= self.spec.class_count {
            return Err(Error::LabelOutOfRange { label, class_count: self.spec.class_count });
        }
        match &self.mechanism {
            Mechanism::Additive(patterns) => {
                let data =
                    x.data.iter().zip(&patterns[label]).map(|(&v, &p)| quantize_toward(v, (v + p).clamp(0.0, 1.0))).collect();
                Ok(Image { shape: x.shape, data })
            }
            Mechanism::Pixel(pixels) => {
                let (py, px, color) = &pixels[label];
                let same = (0..x.shape.channels).all(|c| image_u8(x.get(c, *py, *px)) == Some(color[c] as u8 * 255));
                let mut out = x.clone();
                for (c, &v) in color.iter().enumerate() {
                    out.set(c, *py, *px, if same { 1.0 - v } else { v });
                }
                Ok(out)
            }
            Mechanism::Mixture(members) => {
                let idx = self.mixture_member(&x.content_id()).expect("mixture");
                members[idx].protect(x, label)
            }
        }
    }

    /// Element-wise protection; ids, labels and order are preserved.
    pub fn protect_dataset(&self, dataset: &Dataset) -> Result<Dataset> {
        let samples = dataset
            .iter()
            .map(|s| Ok(Sample { id: s.id.clone(), label: s.label, image: self.protect(&s.image, s.label)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(samples))
    }
}

/// One-shot convenience wrapper around [`Protector`].
pub fn protect(spec: &ProtectionSpec, x: &Image, label: usize) -> Result<Image> {
    Protector::new(spec, x.shape)?.protect(x, label)
}

pub fn protect_dataset(spec: &ProtectionSpec, dataset: &Dataset) -> Result<Dataset> {
    match dataset.shape() {
        None => Ok(Dataset::default()),
        Some(shape) => Protector::new(spec, shape)?.protect_dataset(dataset),
    }
}

fn cell_values(shape: Shape, cell: usize, mut draw: impl FnMut() -> f64) -> Vec<f64> {
    let (gh, gw) = (shape.height.div_ceil(cell), shape.width.div_ceil(cell));
    (0..shape.channels * gh * gw).map(|_| draw()).collect()
}

/// Piecewise-constant CHW image from a grid of `cell × cell` values.
fn expand_cells(shape: Shape, cell: usize, cells: &[f64]) -> Vec<f64> {
    let (gh, gw) = (shape.height.div_ceil(cell), shape.width.div_ceil(cell));
    let mut p = Vec::with_capacity(shape.len());
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                p.push(cells[(c * gh + y / cell) * gw + x / cell]);
            }
        }
    }
    p
}

/// Exact 8-bit code of `v` if it lies on the grid.
fn image_u8(v: f32) -> Option<u8> {
    let k = libm::round(f64::from(v) * 255.0);
    ((f64::from(v) * 255.0 - k).abs() < 1e-3 && (0.0..=255.0).contains(&k)).then_some(k as u8)
}

/// The 8-bit value between `x` and `y` closest to `y`, or `x` itself when no
/// grid value lies between them.
fn quantize_toward(x: f32, y: f32) -> f32 {
    const TOL: f64 = 1e-4;
    let (a, b) = (f64::from(x) * 255.0, f64::from(y) * 255.0);
    let k = if b >= a { libm::floor(b + TOL) } else { libm::ceil(b - TOL) };
    let between = if b >= a { k >= a - TOL } else { k <= a + TOL };
    if between && (0.0..=255.0).contains(&k) {
        (k / 255.0) as f32
    } else {
        x
    }
}

/// Gaussian pre-processing `G_β(x′) = sqrt(1−β) x′ + sqrt(β) z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub beta: f64,
    pub seed: u64,
}

impl Preprocess {
    pub fn identity() -> Self {
        Self { beta: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.beta) {
            Ok(())
        } else {
            Err(Error::Config(format!("beta = {} outside [0, 1]", self.beta)))
        }
    }

    /// Applies the map with noise drawn from `seed`. Not clamped.
    pub fn apply_seeded(&self, x: &Image, seed: u64) -> Image {
        if self.beta == 0.0 {
            return x.clone();
        }
        let (a, s) = (libm::sqrt(1.0 - self.beta), libm::sqrt(self.beta));
        let mut rng = rng::rng_from_seed(seed);
        let data = x.data.iter().map(|&v| (a * f64::from(v) + s * rng::normal(&mut rng)) as f32).collect();
        Image { shape: x.shape, data }
    }

    /// Per-element noise keyed by the sample id, so results do not depend on
    /// dataset order.
    pub fn apply_dataset(&self, dataset: &Dataset) -> Dataset {
        dataset
            .iter()
            .map(|s| Sample {
                id: s.id.clone(),
                label: s.label,
                image: self.apply_seeded(&s.image, rng::derive_seed(self.seed, &s.id)),
            })
            .collect()
    }
}

pub fn preprocess(pp: &Preprocess, x_protected: &Image) -> Image {
    pp.apply_seeded(x_protected, pp.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> Shape {
        Shape { channels: 3, height: 8, width: 8 }
    }

    fn image(seed: u64) -> Image {
        let mut r = rng::rng_from_seed(seed);
        let data = (0..shape().len()).map(|_| rng::uniform(&mut r) as f32).collect();
        Image { shape: shape(), data }.quantized()
    }

    #[test]
    fn quantize_toward_never_overshoots() {
        assert_eq!(quantize_toward(0.5, 0.5), 0.5);
        assert_eq!(quantize_toward(10.0 / 255.0, 18.0 / 255.0), 18.0 / 255.0);
        let q = quantize_toward(0.5, 0.51);
        assert!(q >= 0.5 && q <= 0.51);
        // No grid value between 0.5001 and 0.5002.
        assert_eq!(quantize_toward(0.5001, 0.5002), 0.5001);
    }

    #[test]
    fn linf_hits_the_budget_away_from_the_range_edges() {
        let eps = 8.0 / 255.0;
        let p = Protector::new(&ProtectionSpec::classwise_linf(eps, 10, 1), shape()).unwrap();
        let x = image(3);
        let y = p.protect(&x, 4).unwrap();
        for (a, b) in x.data.iter().zip(&y.data) {
            let d = f64::from((a - b).abs());
            assert!(d <= eps + 1e-6);
            if *a > 0.05 && *a < 0.95 {
                assert!((d - eps).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_budget_is_identity() {
        let x = image(5);
        for spec in [ProtectionSpec::classwise_linf(0.0, 3, 1), ProtectionSpec::patch_l2(0.0, 3, 1)] {
            assert_eq!(protect(&spec, &x, 1).unwrap(), x);
        }
    }

    #[test]
    fn one_pixel_changes_exactly_one_position_even_if_already_colored() {
        let spec = ProtectionSpec::one_pixel(2, 9);
        let p = Protector::new(&spec, shape()).unwrap();
        let Mechanism::Pixel(px) = &p.mechanism else { unreachable!() };
        let (py, pxx, color) = px[0].clone();
        let mut x = image(1);
        for (c, &v) in color.iter().enumerate() {
            x.set(c, py, pxx, v);
        }
        let y = p.protect(&x, 0).unwrap();
        let changed = (0..8 * 8).filter(|&i| (0..3).any(|c| x.data[c * 64 + i] != y.data[c * 64 + i])).count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let spec = ProtectionSpec::classwise_linf(0.1, 3, 1);
        assert!(matches!(protect(&spec, &image(1), 3), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn patterns_are_class_specific_and_frozen() {
        let spec = ProtectionSpec::patch_l2(ProtectionSpec::default_l2_epsilon(shape()), 4, 2);
        let x = image(7);
        let a = protect(&spec, &x, 0).unwrap();
        assert_eq!(a, protect(&spec, &x, 0).unwrap());
        assert_ne!(a, protect(&spec, &x, 1).unwrap());
    }

    #[test]
    fn ids_are_stable_and_distinguish_specs() {
        let a = ProtectionSpec::classwise_linf(8.0 / 255.0, 10, 1);
        assert_eq!(a.id(), a.clone().id());
        assert_ne!(a.id(), ProtectionSpec::classwise_linf(8.0 / 255.0, 10, 2).id());
        assert!(a.id().starts_with("linf-"));
    }

    #[test]
    fn validation() {
        assert!(ProtectionSpec::classwise_linf(-1.0, 10, 0).validate().is_err());
        assert!(ProtectionSpec::classwise_linf(0.1, 0, 0).validate().is_err());
        assert!(ProtectionSpec::mixture(Vec::new(), 0).validate().is_err());
        let mut p = ProtectionSpec::one_pixel(10, 0);
        p.epsilon = 2.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn preprocess_zero_beta_is_identity() {
        let x = image(2);
        assert_eq!(preprocess(&Preprocess { beta: 0.0, seed: 5 }, &x), x);
        assert!(Preprocess { beta: 1.5, seed: 0 }.validate().is_err());
    }
}
