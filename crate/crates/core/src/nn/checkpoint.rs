//! Parameter checkpoints: a JSON manifest next to a little-endian f32 blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{ParamSet, Tensor};
use crate::dataio::write_atomic;
use crate::error::{Error, Result};

const FORMAT: &str = "wrnet-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Blob path for a manifest path: `model.json` pairs with `model.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    let p = manifest.with_extension("bin");
    if p == manifest {
        manifest.with_extension("bin.blob")
    } else {
        p
    }
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet<f32>,
    config: serde_json::Value,
) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(params.num_values() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let offset = bytes.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            nbytes: bytes.len() - offset,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        blob: blob
            .file_name()
            .expect("blob path has a file name")
            .to_string_lossy()
            .into_owned(),
        config,
        tensors,
    };
    write_atomic(&blob, &bytes)?;
    write_atomic(path, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

/// Loads a checkpoint, returning its parameters and stored config.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet<f32>, serde_json::Value)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Parse {
            offset: 0,
            message: format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            ),
        });
    }
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Parse {
                offset: e.offset,
                message: format!("tensor {} has unsupported dtype {}", e.name, e.dtype),
            });
        }
        let n: usize = e.shape.iter().product();
        if e.nbytes != 4 * n {
            return Err(Error::Parse {
                offset: e.offset,
                message: format!(
                    "tensor {} declares {} bytes for {n} values",
                    e.name, e.nbytes
                ),
            });
        }
        let end = e.offset + e.nbytes;
        if end > bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: bytes.len(),
            });
        }
        let data = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok((params, manifest.config))
}
