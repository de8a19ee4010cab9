//! 8-bit PNG images and labeled image folders.
//!
//! A dataset folder holds `<id>.png` files and a `labels.csv` with the header
//! `id,label` followed by one `id,label` line per image.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use bridgepure_core::dataset::{Dataset, Sample};
use bridgepure_core::image::{Image, Shape};
use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, IoContext, Result};

pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).at(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::EXPAND | Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, keep) = match info.color_type {
        ColorType::Grayscale => (1, 1),
        ColorType::GrayscaleAlpha => (2, 1),
        ColorType::Rgb => (3, 3),
        ColorType::Rgba => (4, 3),
        ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
    };
    let bytes: Vec<u8> = buf.chunks_exact(channels).flat_map(|px| px[..keep].iter().copied()).collect();
    Ok(Image::from_hwc_u8(Shape::new(keep, h, w), &bytes)?)
}

/// Writes `image` as an 8-bit grayscale or RGB PNG (values clamped and rounded).
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let color = match image.shape.channels {
        1 => ColorType::Grayscale,
        3 => ColorType::Rgb,
        c => return Err(Error::format(path, format!("cannot store {c}-channel images as PNG"))),
    };
    let file = File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.shape.width as u32, image.shape.height as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer.write_image_data(&image.to_hwc_u8()).map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

pub fn parse_labels_csv(path: &Path, text: &str) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.eq_ignore_ascii_case("id,label")) {
            continue;
        }
        let (id, label) =
            line.split_once(',').ok_or_else(|| Error::format(path, format!("line {}: expected `id,label`", n + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: label `{}` is not a class index", n + 1, label.trim())))?;
        let id = id.trim();
        if id.is_empty() || id.contains(['/', '\\']) {
            return Err(Error::format(path, format!("line {}: invalid id `{id}`", n + 1)));
        }
        out.push((id.to_string(), label));
    }
    Ok(out)
}

/// Reads a folder of `<id>.png` plus `labels.csv`, in `labels.csv` order.
pub fn read_folder(dir: &Path) -> Result<Dataset> {
    let csv = dir.join("labels.csv");
    let text = fs::read_to_string(&csv).at(&csv)?;
    let mut seen = BTreeMap::new();
    let mut samples = Vec::new();
    for (id, label) in parse_labels_csv(&csv, &text)? {
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::format(&csv, format!("duplicate id {id}")));
        }
        let image = read_png(&dir.join(format!("{id}.png")))?;
        if let Some(first) = samples.first().map(|s: &Sample| s.image.shape) {
            if image.shape != first {
                return Err(Error::format(dir.join(format!("{id}.png")), format!("shape {} differs from {first}", image.shape)));
            }
        }
        samples.push(Sample { id, label, image });
    }
    Ok(Dataset::new(samples))
}

pub fn write_folder(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let csv = dir.join("labels.csv");
    let mut w = BufWriter::new(File::create(&csv).at(&csv)?);
    writeln!(w, "id,label").at(&csv)?;
    for s in dataset.iter() {
        write_png(&dir.join(format!("{}.png", s.id)), &s.image)?;
        writeln!(w, "{},{}", s.id, s.label).at(&csv)?;
    }
    w.flush().at(&csv)
}
