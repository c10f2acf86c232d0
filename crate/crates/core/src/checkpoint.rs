//! Binary checkpoint container for model and optimizer state.
//!
//! Layout: `b"STCK"` magic, `u32` LE format version, `u64` LE header
//! length, a JSON header (kind, step, arbitrary config, tensor index),
//! then all tensor payloads as raw little-endian `f32`, concatenated in
//! header-index order. Tensors are indexed by name in sorted order, so a
//! checkpoint's bytes are a pure function of its contents — saving and
//! reloading round-trips bit-exactly, which resumed training relies on.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};

/// Container magic.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STCK";
/// Current format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// A named tensor: shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl TensorData {
    /// Wraps shape and values, validating that they agree.
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> CoreResult<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(CoreError::contract(format!(
                "tensor shape {shape:?} implies {expect} values, got {}",
                values.len()
            )));
        }
        Ok(TensorData { shape, values })
    }

    /// Copies a (possibly non-contiguous) f32 tensor off the device.
    pub fn from_candle(t: &Tensor) -> CoreResult<Self> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?.to_dtype(candle_core::DType::F32)?;
        let values = flat.to_vec1::<f32>()?;
        TensorData::new(shape, values)
    }

    /// Materializes the tensor on `device`.
    pub fn to_candle(&self, device: &Device) -> CoreResult<Tensor> {
        Ok(Tensor::from_vec(
            self.values.clone(),
            self.shape.as_slice(),
            device,
        )?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A complete checkpoint: identification, step counter, the resolved
/// configuration it was produced under, and named tensors (model
/// parameters and, when present, optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// What the tensors parameterize, e.g. `"lm"` or `"vocoder"`.
    pub kind: String,
    /// Global training step at save time.
    pub step: u64,
    /// Arbitrary JSON configuration blob (the model's own config).
    pub config: serde_json::Value,
    /// Tensors in name order.
    pub tensors: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, step: u64, config: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            step,
            config,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, data: TensorData) {
        self.tensors.insert(name.into(), data);
    }

    /// Fetches a tensor by name or fails with a contract error naming it.
    pub fn expect(&self, name: &str) -> CoreResult<&TensorData> {
        self.tensors
            .get(name)
            .ok_or_else(|| CoreError::contract(format!("checkpoint is missing tensor {name:?}")))
    }

    /// Fails unless the checkpoint was saved for `kind`.
    pub fn expect_kind(&self, kind: &str) -> CoreResult<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CoreError::contract(format!(
                "checkpoint kind is {:?}, expected {kind:?}",
                self.kind
            )))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    config: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

/// Serializes a checkpoint to `path` (parent directories are created).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> CoreResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut index = Vec::with_capacity(ckpt.tensors.len());
    let mut offset = 0u64;
    for (name, data) in &ckpt.tensors {
        index.push(IndexEntry {
            name: name.clone(),
            shape: data.shape.clone(),
            offset,
            len: data.len() as u64,
        });
        offset += data.len() as u64;
    }
    let header = Header {
        kind: ckpt.kind.clone(),
        step: ckpt.step,
        config: ckpt.config.clone(),
        tensors: index,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CoreError::format(format!("checkpoint header encoding: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for data in ckpt.tensors.values() {
        let mut bytes = Vec::with_capacity(data.values.len() * 4);
        for v in &data.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes)?;
    }
    file.flush()?;
    Ok(())
}

/// Loads a checkpoint, validating magic, version, and payload size.
///
/// # Errors
///
/// [`CoreError::MissingArtifact`] when the file does not exist;
/// [`CoreError::Format`] on any structural mismatch.
pub fn load_checkpoint(path: &Path) -> CoreResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CoreError::MissingArtifact(path.to_path_buf())
        } else {
            CoreError::Io(e)
        }
    })?;
    let mut cursor = std::io::Cursor::new(&bytes);

    let mut magic = [0u8; 4];
    cursor.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CoreError::format(format!(
            "{}: bad checkpoint magic {magic:?}",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    cursor.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    cursor.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_start = cursor.position() as usize;
    let payload_start = header_start
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            CoreError::format(format!("{}: truncated checkpoint header", path.display()))
        })?;
    let header: Header = serde_json::from_slice(&bytes[header_start..payload_start])
        .map_err(|e| CoreError::format(format!("{}: checkpoint header: {e}", path.display())))?;

    let payload = &bytes[payload_start..];
    let total_elems: u64 = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() as u64 != total_elems * 4 {
        return Err(CoreError::format(format!(
            "{}: payload holds {} bytes but index declares {} elements",
            path.display(),
            payload.len(),
            total_elems
        )));
    }

    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let start = (entry.offset * 4) as usize;
        let end = start + (entry.len * 4) as usize;
        if end > payload.len() {
            return Err(CoreError::format(format!(
                "{}: tensor {:?} extends past payload",
                path.display(),
                entry.name
            )));
        }
        let mut values = Vec::with_capacity(entry.len as usize);
        for chunk in payload[start..end].chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let expect: usize = entry.shape.iter().product();
        if expect != values.len() {
            return Err(CoreError::format(format!(
                "{}: tensor {:?} shape {:?} disagrees with stored length {}",
                path.display(),
                entry.name,
                entry.shape,
                values.len()
            )));
        }
        tensors.insert(
            entry.name.clone(),
            TensorData {
                shape: entry.shape.clone(),
                values,
            },
        );
    }
    Ok(Checkpoint {
        kind: header.kind,
        step: header.step,
        config: header.config,
        tensors,
    })
}
