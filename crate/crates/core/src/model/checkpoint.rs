//! Binary checkpoints: magic, little-endian header length, JSON header,
//! then every tensor as little-endian f64 in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FilterFormer, Forecaster, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPFCKPT1";

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    entries: Vec<EntryHeader>,
}

/// Writes config, parameters and buffers. Round trips are bit-exact.
pub fn save_checkpoint(path: &Path, model: &FilterFormer) -> Result<()> {
    let store = model.params();
    let header = Header {
        config: model.config().clone(),
        entries: store
            .entries()
            .iter()
            .map(|e| EntryHeader {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for e in store.entries() {
        for v in e.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<FilterFormer> {
    let io = |e| Error::io(path, e);
    let bad = |message: String| Error::Format {
        path: path.into(),
        message,
    };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;

    let mut model = FilterFormer::new(header.config, 0)?;
    let store = model.params_mut();
    if store.len() != header.entries.len() {
        return Err(bad(format!(
            "{} tensors stored, model expects {}",
            header.entries.len(),
            store.len()
        )));
    }
    for entry in &header.entries {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| bad(format!("unknown tensor `{}`", entry.name)))?;
        if store.get(id).shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                store.get(id).shape()
            )));
        }
        let mut data = Vec::with_capacity(entry.shape.iter().product());
        let mut buf = [0u8; 8];
        for _ in 0..data.capacity() {
            r.read_exact(&mut buf).map_err(io)?;
            data.push(f64::from_le_bytes(buf));
        }
        store.set_value(id, &data)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(model)
}
