//! Planar (channel-major) float images with values in `[0, 1]`.

use alloc::string::String;
use alloc::vec::Vec;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl core::fmt::Display for Shape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// CHW image. Pixel `(c, y, x)` lives at `c * h * w + y * w + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(alloc::format!("{} values for a {} image", data.len(), shape)));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: alloc::vec![0.0; shape.len()] }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    /// Builds an image from interleaved 8-bit samples (`HWC`, the PNG order).
    pub fn from_hwc_u8(shape: Shape, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != shape.len() {
            return Err(Error::Shape(alloc::format!("{} bytes for a {} image", bytes.len(), shape)));
        }
        let mut img = Self::zeros(shape);
        let c_n = shape.channels;
        for (p, px) in bytes.chunks_exact(c_n).enumerate() {
            for (c, &b) in px.iter().enumerate() {
                img.data[c * shape.pixels() + p] = f32::from(b) / 255.0;
            }
        }
        Ok(img)
    }

    /// Interleaved 8-bit samples after clamping to `[0, 1]` and rounding.
    pub fn to_hwc_u8(&self) -> Vec<u8> {
        let s = self.shape;
        let mut out = alloc::vec![0u8; s.len()];
        for c in 0..s.channels {
            for p in 0..s.pixels() {
                out[p * s.channels + c] = to_u8(self.data[c * s.pixels() + p]);
            }
        }
        out
    }

    /// Clamps to `[0, 1]` and snaps every value onto the 8-bit grid.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = f32::from(to_u8(*v)) / 255.0;
        }
    }

    pub fn quantized(mut self) -> Self {
        self.quantize();
        self
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Hex SHA-256 over the shape and 8-bit pixel content; used as image id.
    pub fn content_id(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.shape.channels as u32).to_le_bytes());
        h.update((self.shape.height as u32).to_le_bytes());
        h.update((self.shape.width as u32).to_le_bytes());
        h.update(self.to_hwc_u8());
        let digest = h.finalize();
        hex::encode(&digest[..12])
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    libm_round(v * 255.0) as u8
}

#[inline]
fn libm_round(v: f32) -> f32 {
    num_traits::Float::round(v)
}
