//! Single-file checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DQCK"
//! 4       4     u32 format version
//! 8       8     u64 manifest length M
//! 16      M     UTF-8 JSON manifest {kind, meta, arrays: [{name, dtype, rows, cols, offset}]}
//! 16+M    ...   array blob; each array at `offset` bytes from the blob start,
//!               f32 / i32 as 4-byte little-endian values, i8 as single bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{QuantSpec, SiteSet};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"DQCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
    I32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl ArrayData {
    fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::I8(_) => DType::I8,
            ArrayData::I32(_) => DType::I32,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I8(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            ArrayData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: ArrayData,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: DType,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Encodes a checkpoint container.
pub fn encode(kind: &str, meta: serde_json::Value, arrays: &[Array]) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for a in arrays {
        if a.data.len() != a.rows * a.cols {
            return Err(Error::Checkpoint(format!("array {} has {} values for {}x{}", a.name, a.data.len(), a.rows, a.cols)));
        }
        entries.push(ArrayEntry { name: a.name.clone(), dtype: a.data.dtype(), rows: a.rows, cols: a.cols, offset: blob.len() as u64 });
        a.data.write(&mut blob);
    }
    let manifest = serde_json::to_vec(&Manifest { kind: kind.to_string(), meta, arrays: entries })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Decodes a container into its kind, metadata and arrays.
pub fn decode(bytes: &[u8]) -> Result<(String, serde_json::Value, Vec<Array>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let blob = &bytes[16 + mlen..];
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for e in manifest.arrays {
        let n = e.rows * e.cols;
        let start = e.offset as usize;
        let width = match e.dtype {
            DType::I8 => 1,
            _ => 4,
        };
        let raw = blob
            .get(start..start + n * width)
            .ok_or_else(|| Error::Checkpoint(format!("array {} runs past the end of the file", e.name)))?;
        let data = match e.dtype {
            DType::F32 => ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
            DType::I32 => ArrayData::I32(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4"))).collect()),
            DType::I8 => ArrayData::I8(raw.iter().map(|&b| b as i8).collect()),
        };
        arrays.push(Array { name: e.name, rows: e.rows, cols: e.cols, data });
    }
    Ok((manifest.kind, manifest.meta, arrays))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub const MODEL_KIND: &str = "model";

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    spec: ModelSpec,
    quant: QuantSpec,
    config: Option<TrainConfig>,
    sites: Vec<SiteSet>,
    readout_sites: SiteSet,
}

/// A trained model and the configuration it was trained with.
pub struct ModelCheckpoint {
    pub model: Model,
    pub config: Option<TrainConfig>,
}

pub fn model_to_bytes(model: &Model, config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let meta = ModelMeta {
        spec: model.spec.clone(),
        quant: model.quant.clone(),
        config: config.cloned(),
        sites: model.sites.clone(),
        readout_sites: model.readout_sites.clone(),
    };
    let arrays: Vec<Array> = model
        .params
        .iter()
        .map(|p| Array {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            data: ArrayData::F32(p.value.data().to_vec()),
        })
        .collect();
    encode(MODEL_KIND, serde_json::to_value(meta)?, &arrays)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let (kind, meta, arrays) = decode(bytes)?;
    if kind != MODEL_KIND {
        return Err(Error::Checkpoint(format!("expected a model checkpoint, found {kind:?}")));
    }
    let meta: ModelMeta = serde_json::from_value(meta)?;
    let mut model = Model::new(meta.spec, meta.quant, 0)?;
    if arrays.len() != model.params.len() {
        return Err(Error::Checkpoint(format!("{} arrays for {} parameters", arrays.len(), model.params.len())));
    }
    for (p, a) in model.params.iter_mut().zip(arrays) {
        if p.name != a.name || p.value.shape() != (a.rows, a.cols) {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} does not match stored {} {:?}",
                p.name,
                p.value.shape(),
                a.name,
                (a.rows, a.cols)
            )));
        }
        let ArrayData::F32(v) = a.data else {
            return Err(Error::Checkpoint(format!("parameter {} is not f32", a.name)));
        };
        p.value = Tensor::from_vec(a.rows, a.cols, v)?;
    }
    if meta.sites.len() != model.sites.len() {
        return Err(Error::Checkpoint("quantization state does not match the layer count".into()));
    }
    model.sites = meta.sites;
    model.readout_sites = meta.readout_sites;
    Ok(ModelCheckpoint { model, config: meta.config })
}

pub fn save_model(path: &Path, model: &Model, config: Option<&TrainConfig>) -> Result<()> {
    write_file(path, &model_to_bytes(model, config)?)
}

pub fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    model_from_bytes(&read_file(path)?)
}
