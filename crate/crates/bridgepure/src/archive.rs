//! On-disk pair archives.
//!
//! Layout of an archive directory:
//!
//! ```text
//! manifest.json
//! clean/<id>.png
//! protected/<id>.png
//! ```
//!
//! `manifest.json` stores the protection spec, its id, the image shape, the
//! manifest hash and one record `{id, label, clean, protected}` per pair,
//! where `clean` and `protected` are paths relative to the archive root.

use std::fs;
use std::path::Path;

use bridgepure_core::image::Shape;
use bridgepure_core::pairing::{PairArchive, PairRecord};
use bridgepure_core::protections::ProtectionSpec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::imageio::{read_png, write_png};

pub const MANIFEST_FORMAT: &str = "bridgepure-pairs";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub label: usize,
    pub clean: String,
    pub protected: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub protection_id: String,
    pub spec: ProtectionSpec,
    pub shape: Option<Shape>,
    pub manifest_hash: String,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn of(archive: &PairArchive) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            protection_id: archive.protection_id(),
            spec: archive.spec.clone(),
            shape: archive.records.first().map(|r| r.clean.shape),
            manifest_hash: archive.manifest_hash(),
            records: archive
                .records
                .iter()
                .map(|r| ManifestRecord {
                    id: r.id.clone(),
                    label: r.label,
                    clean: format!("clean/{}.png", r.id),
                    protected: format!("protected/{}.png", r.id),
                })
                .collect(),
        }
    }
}

pub fn write_archive(dir: &Path, archive: &PairArchive) -> Result<Manifest> {
    for sub in ["clean", "protected"] {
        fs::create_dir_all(dir.join(sub)).at(dir.join(sub))?;
    }
    let manifest = Manifest::of(archive);
    for (r, m) in archive.records.iter().zip(&manifest.records) {
        write_png(&dir.join(&m.clean), &r.clean)?;
        write_png(&dir.join(&m.protected), &r.protected)?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").at(&path)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).at(&path)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
    if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
        return Err(Error::format(&path, format!("unsupported archive format {} v{}", m.format, m.version)));
    }
    Ok(m)
}

/// Reads an archive and checks its manifest hash against the stored pixels.
pub fn read_archive(dir: &Path) -> Result<PairArchive> {
    let m = read_manifest(dir)?;
    let mut records = Vec::with_capacity(m.records.len());
    for r in &m.records {
        for rel in [&r.clean, &r.protected] {
            if Path::new(rel).is_absolute() || rel.contains("..") {
                return Err(Error::format(dir.join("manifest.json"), format!("record path {rel} escapes the archive")));
            }
        }
        records.push(PairRecord {
            id: r.id.clone(),
            label: r.label,
            clean: read_png(&dir.join(&r.clean))?,
            protected: read_png(&dir.join(&r.protected))?,
        });
    }
    let archive = PairArchive { spec: m.spec, records };
    let actual = archive.manifest_hash();
    if actual != m.manifest_hash {
        return Err(Error::format(
            dir.join("manifest.json"),
            format!("manifest hash {} does not match archive content {actual}", m.manifest_hash),
        ));
    }
    Ok(archive)
}
