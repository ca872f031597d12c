//! Self-describing checkpoints: a little-endian `f32` blob plus a JSON
//! sidecar with the architecture, tensor table, provenance and blob digest.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ParameterSet;
use crate::data::FactorSpec;
use crate::error::{Error, Result};
use crate::vae::{ArchitectureConfig, Vae};

pub const CHECKPOINT_FORMAT: &str = "factor-ood-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

/// Provenance recorded alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub seed: u64,
    pub factors: Vec<FactorSpec>,
    pub training: serde_json::Value,
    pub dataset_digest: Option<String>,
    pub config_digest: Option<String>,
    pub epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub architecture: ArchitectureConfig,
    pub latent_size: usize,
    pub dtype: String,
    pub info: CheckpointInfo,
    pub tensors: Vec<TensorMeta>,
    pub blob_sha256: String,
}

/// Sidecar path for a blob path (`model.bin` -> `model.json`).
pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

pub fn save_checkpoint(blob_path: &Path, vae: &Vae<f32>, info: CheckpointInfo) -> Result<CheckpointMeta> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, entry) in vae.params().iter() {
        tensors.push(TensorMeta {
            name: name.to_string(),
            shape: entry.value.shape().to_vec(),
            trainable: entry.trainable,
            offset,
        });
        for v in entry.value.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += entry.value.len();
    }
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        architecture: vae.arch().clone(),
        latent_size: vae.latent_size(),
        dtype: "f32".into(),
        info,
        tensors,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    if let Some(dir) = blob_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(blob_path, &blob).map_err(|e| Error::io(blob_path, e))?;
    let side = sidecar_path(blob_path);
    let json = serde_json::to_string_pretty(&meta).expect("serializable metadata");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(meta)
}

/// Loads a checkpoint given either its blob or its sidecar path.
pub fn load_checkpoint(path: &Path) -> Result<(Vae<f32>, CheckpointMeta)> {
    let blob_path = if path.extension().is_some_and(|e| e == "json") { path.with_extension("bin") } else { path.to_path_buf() };
    let side = sidecar_path(&blob_path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side, e))?;
    if meta.format != CHECKPOINT_FORMAT || meta.dtype != "f32" {
        return Err(Error::format(&side, format!("unsupported checkpoint format {} ({})", meta.format, meta.dtype)));
    }
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if hex::encode(Sha256::digest(&blob)) != meta.blob_sha256 {
        return Err(Error::format(&blob_path, "blob digest does not match its sidecar"));
    }
    let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut params = ParameterSet::new();
    for t in &meta.tensors {
        let len: usize = t.shape.iter().product();
        let data = floats
            .get(t.offset..t.offset + len)
            .ok_or_else(|| Error::format(&blob_path, format!("tensor `{}` runs past the blob", t.name)))?
            .to_vec();
        let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), data).expect("length checked");
        if t.trainable {
            params.insert_param(t.name.clone(), arr)?;
        } else {
            params.insert_buffer(t.name.clone(), arr)?;
        }
    }
    let vae = Vae::from_parts(meta.architecture.clone(), params)?;
    Ok((vae, meta))
}
