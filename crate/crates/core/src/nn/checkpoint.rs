use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Layer;
use super::tensor::{Real, Tensor};
use super::{NnError, Result};

const MAGIC: &[u8; 8] = b"RTCKPT01";

/// Header record for one tensor; `offset` and `len` count f32 elements
/// into the blob that follows the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    entries: Vec<CheckpointEntry>,
}

/// Named f32 tensors plus free-form JSON metadata.
///
/// On disk: 8-byte magic, u64 LE header length, JSON header, then the
/// little-endian f32 blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn ck_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NnError::Checkpoint(msg.into()))
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    /// Captures a layer's state, prefixing every name with `prefix`.
    pub fn add_layer<T: Real>(&mut self, prefix: &str, layer: &dyn Layer<T>) {
        for (name, t) in layer.state() {
            self.tensors.push((format!("{prefix}{name}"), t.cast()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Restores a layer's state from entries under `prefix`. Every state
    /// tensor must be present with a matching shape.
    pub fn load_layer<T: Real>(&self, prefix: &str, layer: &mut dyn Layer<T>) -> Result<()> {
        let index: HashMap<&str, &Tensor<f32>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, dst) in layer.state_mut() {
            let full = format!("{prefix}{name}");
            let Some(src) = index.get(full.as_str()) else { return ck_err(format!("missing tensor {full}")) };
            if src.shape() != dst.shape() {
                return ck_err(format!("tensor {full}: stored {:?}, expected {:?}", src.shape(), dst.shape()));
            }
            *dst = src.cast();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<()> {
    let mut entries = Vec::with_capacity(ck.tensors.len());
    let mut offset = 0;
    for (name, t) in &ck.tensors {
        entries.push(CheckpointEntry { name: name.clone(), shape: t.shape().to_vec(), offset, len: t.len() });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header { meta: ck.meta.clone(), entries })
        .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in &ck.tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return ck_err("bad magic");
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return ck_err(format!("header length {len} too large"));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    if blob.len() % 4 != 0 {
        return ck_err("blob length is not a multiple of 4");
    }
    let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut tensors = Vec::with_capacity(header.entries.len());
    for e in header.entries {
        let end = e.offset.checked_add(e.len).filter(|&end| end <= floats.len());
        let Some(end) = end else { return ck_err(format!("tensor {} out of bounds", e.name)) };
        let t = Tensor::new(e.shape, floats[e.offset..end].to_vec())
            .map_err(|err| NnError::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        tensors.push((e.name, t));
    }
    Ok(Checkpoint { meta: header.meta, tensors })
}
