//! Single-file tensor archive and model checkpoints.
//!
//! Layout: the 8-byte magic `HSEGARCH`, a little-endian `u32` version, a
//! little-endian `u64` length followed by a JSON header, then the raw
//! little-endian `f32` payload of every tensor in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{NetworkConfig, NetworkParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Orientation;

const MAGIC: &[u8; 8] = b"HSEGARCH";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveHeader {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = ArchiveHeader {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, t) in &self.tensors {
            for &v in &t.data {
                w.write_f32::<LittleEndian>(v).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a tensor archive", path.display())));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let header: ArchiveHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut data = vec![0.0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
            tensors.push((entry.name, Tensor::from_vec(entry.shape, data)?));
        }
        Ok(TensorArchive {
            meta: header.meta,
            tensors,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    network: NetworkConfig,
    orientation: Option<Orientation>,
    epoch: usize,
    best_val_dice: f32,
}

/// A trained (or partially trained) network with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub orientation: Option<Orientation>,
    /// Epoch whose parameters are stored.
    pub epoch: usize,
    pub best_val_dice: f32,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let meta = CheckpointMeta {
        network: ckpt.params.config.clone(),
        orientation: ckpt.orientation,
        epoch: ckpt.epoch,
        best_val_dice: ckpt.best_val_dice,
    };
    let archive = TensorArchive {
        meta: serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
        tensors: ckpt
            .params
            .named_tensors()
            .into_iter()
            .map(|t| (t.name, t.tensor.clone()))
            .collect(),
    };
    archive.write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let archive = TensorArchive::read(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(archive.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = NetworkParams::build(&meta.network, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut stored: std::collections::HashMap<String, Tensor> = archive.tensors.into_iter().collect();
    for slot in params.named_tensors_mut() {
        let t = stored
            .remove(&slot.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", slot.name)))?;
        if t.shape != slot.tensor.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                slot.name, t.shape, slot.tensor.shape
            )));
        }
        *slot.tensor = t;
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
    }
    Ok(Checkpoint {
        params,
        orientation: meta.orientation,
        epoch: meta.epoch,
        best_val_dice: meta.best_val_dice,
    })
}
