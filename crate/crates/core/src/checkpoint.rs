//! Versioned binary checkpoints: magic, version, model kind, config JSON,
//! then named f32 tensors. Loading rebuilds the model layout from the
//! stored config and verifies every tensor name and shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crqvae::{CrqConfig, CrqModel};
use crate::error::{HigrError, Result};
use crate::hsd::{HsdModel, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::TensorData;

const MAGIC: &[u8; 8] = b"HIGRCKPT";
const VERSION: u32 = 1;

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u64).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R, what: &str) -> Result<Vec<u8>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|e| HigrError::Data(format!("checkpoint: {what} length: {e}")))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| HigrError::Data(format!("checkpoint: {what}: {e}")))?;
    Ok(buf)
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| HigrError::Data(format!("checkpoint: {what}: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

fn write_checkpoint(path: &Path, kind: &str, config_json: &str, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_bytes(&mut w, kind.as_bytes())?;
    write_bytes(&mut w, config_json.as_bytes())?;
    write_u64(&mut w, params.len() as u64)?;
    for (name, t) in params.iter() {
        write_bytes(&mut w, name.as_bytes())?;
        write_u64(&mut w, t.shape.len() as u64)?;
        for &d in &t.shape {
            write_u64(&mut w, d as u64)?;
        }
        write_u64(&mut w, t.data.len() as u64)?;
        for &v in t.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct RawCheckpoint {
    kind: String,
    config_json: String,
    tensors: Vec<(String, TensorData)>,
}

fn read_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let f = File::open(path)
        .map_err(|e| HigrError::Data(format!("checkpoint: open {}: {e}", path.display())))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| HigrError::Data(format!("checkpoint: header: {e}")))?;
    if &magic != MAGIC {
        return Err(HigrError::Data(format!(
            "checkpoint: bad magic in {}",
            path.display()
        )));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)
        .map_err(|e| HigrError::Data(format!("checkpoint: version: {e}")))?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(HigrError::Data(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let kind = String::from_utf8(read_bytes(&mut r, "kind")?)
        .map_err(|e| HigrError::Data(format!("checkpoint: kind: {e}")))?;
    let config_json = String::from_utf8(read_bytes(&mut r, "config")?)
        .map_err(|e| HigrError::Data(format!("checkpoint: config: {e}")))?;
    let n = read_u64(&mut r, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n);
    for i in 0..n {
        let name = String::from_utf8(read_bytes(&mut r, "tensor name")?)
            .map_err(|e| HigrError::Data(format!("checkpoint: tensor {i} name: {e}")))?;
        let ndim = read_u64(&mut r, "ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, "dim")? as usize);
        }
        let count = read_u64(&mut r, "data length")? as usize;
        if count != shape.iter().product::<usize>() {
            return Err(HigrError::Data(format!(
                "checkpoint: tensor {name}: {count} values for shape {shape:?}"
            )));
        }
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| HigrError::Data(format!("checkpoint: tensor {name} data: {e}")))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        for &v in &data {
            if !v.is_finite() {
                return Err(HigrError::Checkpoint(format!(
                    "tensor {name} holds a non-finite value"
                )));
            }
        }
        tensors.push((name, TensorData::new(shape, data)));
    }
    Ok(RawCheckpoint {
        kind,
        config_json,
        tensors,
    })
}

/// Overwrite the freshly-initialized params with stored tensors, verifying
/// names and shapes line up one-to-one.
fn restore_params(params: &mut ParamSet, stored: Vec<(String, TensorData)>) -> Result<()> {
    if stored.len() != params.len() {
        return Err(HigrError::Data(format!(
            "checkpoint: {} tensors for a model with {} parameters",
            stored.len(),
            params.len()
        )));
    }
    for (i, (name, t)) in stored.into_iter().enumerate() {
        let idx = crate::params::PIdx(i);
        if params.name(idx) != name {
            return Err(HigrError::Data(format!(
                "checkpoint: tensor {i} named {name}, expected {}",
                params.name(idx)
            )));
        }
        if params.get(idx).shape != t.shape {
            return Err(HigrError::Data(format!(
                "checkpoint: tensor {name} shape {:?}, expected {:?}",
                t.shape,
                params.get(idx).shape
            )));
        }
        *params.get_mut(idx) = t;
    }
    Ok(())
}

pub fn save_crq(path: &Path, model: &CrqModel) -> Result<()> {
    let config_json = serde_json::to_string(&model.cfg)
        .map_err(|e| HigrError::Data(format!("checkpoint: serialize config: {e}")))?;
    write_checkpoint(path, "crq", &config_json, &model.params)
}

pub fn load_crq(path: &Path) -> Result<CrqModel> {
    let raw = read_checkpoint(path)?;
    if raw.kind != "crq" {
        return Err(HigrError::Data(format!(
            "checkpoint: kind {} where a tokenizer checkpoint was expected",
            raw.kind
        )));
    }
    let cfg: CrqConfig = serde_json::from_str(&raw.config_json)
        .map_err(|e| HigrError::Data(format!("checkpoint: config: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = CrqModel::init(cfg, &mut rng)?;
    restore_params(&mut model.params, raw.tensors)?;
    Ok(model)
}

pub fn save_hsd(path: &Path, model: &HsdModel) -> Result<()> {
    let config_json = serde_json::to_string(&model.cfg)
        .map_err(|e| HigrError::Data(format!("checkpoint: serialize config: {e}")))?;
    write_checkpoint(path, "hsd", &config_json, &model.params)
}

pub fn load_hsd(path: &Path) -> Result<HsdModel> {
    let raw = read_checkpoint(path)?;
    if raw.kind != "hsd" {
        return Err(HigrError::Data(format!(
            "checkpoint: kind {} where a decoder checkpoint was expected",
            raw.kind
        )));
    }
    let cfg: ModelConfig = serde_json::from_str(&raw.config_json)
        .map_err(|e| HigrError::Data(format!("checkpoint: config: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = HsdModel::init(cfg, &mut rng)?;
    restore_params(&mut model.params, raw.tensors)?;
    Ok(model)
}
