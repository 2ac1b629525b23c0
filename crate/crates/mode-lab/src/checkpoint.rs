//! Bit-exact model checkpoints.
//!
//! Layout: 8-byte magic `MODELAB1`, a little-endian u32 header length, a
//! JSON header (model config plus per-parameter name/shape/trainability),
//! then every parameter's values as little-endian f64 in header order.
//! Values round-trip exactly because they are stored as raw bit patterns.

use std::fs;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MODELAB1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    backbone_seed: u64,
    run_seed: u64,
    params: Vec<ParamMeta>,
}

/// Write the model's parameters to `path`.
pub fn save(path: &Path, model: &Model, store: &ParamStore, backbone_seed: u64, run_seed: u64) -> Result<()> {
    let metas: Vec<ParamMeta> = store
        .iter()
        .map(|(_, p)| ParamMeta {
            name: p.name.clone(),
            shape: p.value.shape.clone(),
            trainable: p.trainable,
        })
        .collect();
    let header = Header {
        config: model.cfg.clone(),
        backbone_seed,
        run_seed,
        params: metas,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header encode: {}", e)))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = fs::File::create(path)?;
    out.write_all(MAGIC)?;
    out.write_all(&(header_json.len() as u32).to_le_bytes())?;
    out.write_all(&header_json)?;
    for (_, p) in store.iter() {
        for v in &p.value.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Rebuild a model from a checkpoint: re-run construction from the stored
/// config and seeds, then overwrite every parameter with the stored values.
pub fn load(path: &Path) -> Result<(Model, ParamStore)> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Format(format!("checkpoint header decode: {}", e)))?;

    let (model, mut store) = Model::build(&header.config, header.backbone_seed, header.run_seed)?;
    if store.len() != header.params.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} params, model has {}",
            header.params.len(),
            store.len()
        )));
    }
    for (slot, meta) in header.params.iter().enumerate() {
        if store.name(slot) != meta.name {
            return Err(Error::Format(format!(
                "checkpoint param {} is '{}', model expects '{}'",
                slot, meta.name, store.name(slot)
            )));
        }
        if store.get(slot).shape != meta.shape {
            return Err(Error::Format(format!(
                "checkpoint param '{}' has shape {:?}, model expects {:?}",
                meta.name, meta.shape, store.get(slot).shape
            )));
        }
        let count: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            file.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        store.set_value(slot, Tensor { shape: meta.shape.clone(), data })?;
        store.set_trainable(slot, meta.trainable);
    }
    let mut tail = [0u8; 1];
    if file.read(&mut tail)? != 0 {
        return Err(Error::Format("checkpoint has trailing bytes".into()));
    }
    Ok((model, store))
}
