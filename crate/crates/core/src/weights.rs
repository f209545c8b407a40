//! Weight files: an 8-byte magic, a length-prefixed JSON manifest carrying
//! the full model configuration and a tensor directory, then raw
//! little-endian blobs in manifest order. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{named_tensors, named_tensors_mut};

const MAGIC: &[u8; 8] = b"HRPVTW01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob section.
    offset: u64,
    /// Byte length of the blob.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Serializes every tensor the model owns, running statistics included, so
/// evaluation after a reload matches exactly.
pub fn save_weights<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let tensors = named_tensors(model);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blobs: Vec<u8> = Vec::new();
    for (name, t) in &tensors {
        let offset = blobs.len() as u64;
        for v in t.data() {
            v.write_le(&mut blobs);
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.as_str().to_string(),
            offset,
            len: blobs.len() as u64 - offset,
        });
    }
    let manifest = serde_json::to_vec(&Manifest { config: model.config.clone(), tensors: entries })?;

    let mut file = Vec::with_capacity(8 + 8 + manifest.len() + blobs.len());
    file.extend_from_slice(MAGIC);
    file.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    file.extend_from_slice(&manifest);
    file.extend_from_slice(&blobs);
    fs::write(path, file)?;
    Ok(())
}

/// Rebuilds the model from the embedded configuration and overwrites every
/// tensor from the blobs. The manifest must cover exactly the tensors the
/// rebuilt model owns, with matching shapes and element type.
pub fn load_weights<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let file = fs::read(path)?;
    if file.len() < 16 || &file[..8] != MAGIC {
        return Err(Error::Weights(format!(
            "{} is not a weight file (bad magic)",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(file[8..16].try_into().unwrap()) as usize;
    let blob_start = 16usize.checked_add(mlen).filter(|&s| s <= file.len()).ok_or_else(
        || Error::Weights(format!("manifest length {mlen} exceeds the file size {}", file.len())),
    )?;
    let manifest: Manifest = serde_json::from_slice(&file[16..blob_start])?;
    let blobs = &file[blob_start..];

    let mut model: Model<T> = Model::build(manifest.config)?;
    let mut params = named_tensors_mut(&mut model);
    if params.len() != manifest.tensors.len() {
        return Err(Error::Weights(format!(
            "manifest lists {} tensors but the model owns {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    let esize = T::DTYPE.size();
    for (entry, (name, t)) in manifest.tensors.iter().zip(params.iter_mut()) {
        if entry.name != *name {
            return Err(Error::Weights(format!(
                "manifest tensor {} does not match model tensor {name}",
                entry.name
            )));
        }
        if entry.dtype != T::DTYPE.as_str() {
            return Err(Error::Weights(format!(
                "{name} is stored as {} but the model loads {}",
                entry.dtype,
                T::DTYPE.as_str()
            )));
        }
        if entry.shape != t.shape() {
            return Err(Error::Weights(format!(
                "{name} is stored with shape {:?} but the model expects {:?}",
                entry.shape,
                t.shape()
            )));
        }
        let need = t.numel() as u64 * esize as u64;
        if entry.len != need {
            return Err(Error::Weights(format!(
                "{name} blob holds {} bytes, shape {:?} needs {need}",
                entry.len, entry.shape
            )));
        }
        let lo = entry.offset as usize;
        let hi = lo + entry.len as usize;
        if hi > blobs.len() {
            return Err(Error::Weights(format!(
                "{name} blob spans bytes {}..{} past the end of the file ({} blob bytes)",
                blob_start + lo,
                blob_start + hi,
                blobs.len()
            )));
        }
        let raw = &blobs[lo..hi];
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(esize)) {
            *dst = T::read_le(chunk);
        }
    }
    Ok(model)
}
