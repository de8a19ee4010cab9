//! Binary checkpoints of score models.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic     4 bytes  "BPCK"
//! version   u32      1
//! hlen      u64      length of the JSON header
//! header    hlen bytes of UTF-8 JSON (CheckpointHeader)
//! blocks    u32      number of tensor blocks
//! per block:
//!   nlen    u32, then nlen bytes of UTF-8 name
//!   ndim    u32, then ndim × u64 dimensions
//!   data    product(dims) × f32
//! ```
//!
//! Block names are `params/<p>`, `ema/<p>`, `adam_m/<p>` and `adam_v/<p>`
//! for every parameter `<p>` of the model.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use bridgepure_core::bridge_math::NoiseSchedule;
use bridgepure_core::nn::ParamStore;
use bridgepure_core::score_model::{ModelConfig, ScoreModel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"BPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schedule: NoiseSchedule,
    pub model: ModelConfig,
    pub step: u64,
    pub ema_decay: f32,
    pub adam_step: u64,
    /// Hash of the configuration that produced the model, if known.
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
}

struct Block<'a> {
    name: String,
    dims: &'a [usize],
    data: &'a [f32],
}

pub fn encode(model: &ScoreModel, config_hash: Option<&str>, seed: Option<u64>) -> Vec<u8> {
    let header = CheckpointHeader {
        schedule: model.schedule,
        model: model.config,
        step: model.step,
        ema_decay: model.ema_decay,
        adam_step: model.optimizer.step,
        config_hash: config_hash.map(str::to_string),
        seed,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut blocks = Vec::new();
    for (i, p) in model.params.params.iter().enumerate() {
        blocks.push(Block { name: format!("params/{}", p.name), dims: &p.shape, data: &p.value });
        let e = &model.ema_params.params[i];
        blocks.push(Block { name: format!("ema/{}", e.name), dims: &e.shape, data: &e.value });
        blocks.push(Block { name: format!("adam_m/{}", p.name), dims: &p.shape, data: &model.optimizer.m[i] });
        blocks.push(Block { name: format!("adam_v/{}", p.name), dims: &p.shape, data: &model.optimizer.v[i] });
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
        for &d in b.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn fill(
    store: &mut ParamStore,
    name: &str,
    dims: &[usize],
    data: Vec<f32>,
    slot: &mut [Option<Vec<f32>>],
) -> std::result::Result<(), String> {
    let id = store.find(name).ok_or_else(|| format!("unknown parameter {name}"))?;
    let p = &store.params[id.0];
    if p.shape != dims {
        return Err(format!("parameter {name} has shape {:?}, checkpoint holds {dims:?}", p.shape));
    }
    if slot[id.0].replace(data).is_some() {
        return Err(format!("duplicate block for {name}"));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(ScoreModel, CheckpointHeader), String> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let hlen = usize::try_from(c.u64()?).map_err(|_| "header too large")?;
    let header: CheckpointHeader = serde_json::from_slice(c.take(hlen)?).map_err(|e| format!("bad header: {e}"))?;
    let mut model = ScoreModel::new(header.schedule, header.model).map_err(|e| e.to_string())?;
    let n = model.params.len();
    let mut slots: [Vec<Option<Vec<f32>>>; 4] = std::array::from_fn(|_| vec![None; n]);
    let blocks = c.u32()?;
    for _ in 0..blocks {
        let nlen = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?).map_err(|_| "block name is not UTF-8")?.to_string();
        let ndim = c.u32()? as usize;
        let dims = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor too large")?;
        let raw = c.take(count.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let (kind, pname) = name.split_once('/').ok_or_else(|| format!("bad block name {name}"))?;
        let k = match kind {
            "params" => 0,
            "ema" => 1,
            "adam_m" => 2,
            "adam_v" => 3,
            _ => return Err(format!("unknown block kind {kind}")),
        };
        fill(&mut model.params, pname, &dims, data, &mut slots[k])?;
    }
    if c.at != bytes.len() {
        return Err("trailing bytes after the last block".into());
    }
    let [p, e, m, v] = slots;
    for (i, ((p, e), (m, v))) in p.into_iter().zip(e).zip(m.into_iter().zip(v)).enumerate() {
        let name = model.params.params[i].name.clone();
        let missing = || format!("checkpoint lacks a block for {name}");
        model.params.params[i].value = p.ok_or_else(missing)?;
        model.ema_params.params[i].value = e.ok_or_else(missing)?;
        model.optimizer.m[i] = m.ok_or_else(missing)?;
        model.optimizer.v[i] = v.ok_or_else(missing)?;
    }
    model.step = header.step;
    model.ema_decay = header.ema_decay;
    model.optimizer.step = header.adam_step;
    Ok((model, header))
}

pub fn save(path: &Path, model: &ScoreModel, config_hash: Option<&str>, seed: Option<u64>) -> Result<()> {
    let bytes = encode(model, config_hash, seed);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).at(&tmp)?;
    f.write_all(&bytes).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

pub fn load(path: &Path) -> Result<(ScoreModel, CheckpointHeader)> {
    let mut bytes = Vec::new();
    fs::File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}
