//! `EPD1` magic, little-endian `u64` header length, JSON header, then raw
//! little-endian tensor payloads in header order.
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{init_params_dtype, ModelConfig, ModelParams};
use crate::diffusion::{ScheduleConfig, Standardizer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EPD1";
const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    schedule: ScheduleConfig,
    standardizer: Standardizer,
    dtype: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

pub fn checkpoint_save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        version: FORMAT_VERSION,
        config: params.config,
        schedule: params.schedule,
        standardizer: params.standardizer.clone(),
        dtype: dtype_name(params.dtype()).into(),
        tensors: params
            .vars()
            .iter()
            .map(|(name, v)| Entry { name: name.clone(), shape: v.dims().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 12 + 4 * params.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, v) in params.vars() {
        let flat = v.flatten_all()?;
        match params.dtype() {
            DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            _ => flat.to_vec1::<f32>()?.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint: bad magic bytes".into()));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    if len > MAX_HEADER || 12 + len as usize > bytes.len() {
        return Err(Error::Checkpoint(format!("header length {len} exceeds file size")));
    }
    let end = 12 + len as usize;
    let header: Header =
        serde_json::from_slice(&bytes[12..end]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    Ok((header, end))
}

fn load(path: &Path, requested: Option<&ModelConfig>) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let (header, mut offset) = read_header(&bytes)?;
    let dtype = match header.dtype.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    };
    let cfg = requested.copied().unwrap_or(header.config);
    let mut params = init_params_dtype(&cfg, 0, dtype)?;
    if header.tensors.len() != params.vars().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            header.tensors.len(),
            params.vars().len()
        )));
    }
    let width = if dtype == DType::F64 { 8 } else { 4 };
    for (entry, (name, var)) in header.tensors.iter().zip(params.vars()) {
        if &entry.name != name {
            return Err(Error::Checkpoint(format!("tensor {} found where {name} was expected", entry.name)));
        }
        if entry.shape != var.dims() {
            return Err(Error::Shape(format!(
                "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                entry.shape,
                var.dims()
            )));
        }
        let n = var.elem_count();
        let end = offset + n * width;
        let raw = bytes
            .get(offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload of tensor {name} is truncated")))?;
        let t = if dtype == DType::F64 {
            let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, var.shape(), &Device::Cpu)?
        } else {
            let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, var.shape(), &Device::Cpu)?
        };
        var.set(&t)?;
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after payload", bytes.len() - offset)));
    }
    if header.standardizer.dim() != cfg.target_dim() {
        return Err(Error::Shape(format!(
            "standardizer width {} does not match target width {}",
            header.standardizer.dim(),
            cfg.target_dim()
        )));
    }
    header.standardizer.validate()?;
    params.standardizer = header.standardizer;
    params.schedule = header.schedule;
    Ok(params)
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<ModelParams> {
    load(path.as_ref(), None)
}

/// Loads weights into the architecture described by `cfg`.
pub fn checkpoint_load_as(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ModelParams> {
    load(path.as_ref(), Some(cfg))
}
