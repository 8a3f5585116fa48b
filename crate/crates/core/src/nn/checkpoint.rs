//! Single-file checkpoints: every parameter keyed by its hierarchical name,
//! plus the model configuration and training position as JSON metadata.

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use super::model::{Model, ModelConfig};
use crate::error::{Error, Result};

const META_KEY: &str = "crunet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Curriculum step (or stage epoch) that produced the checkpoint.
    pub step: usize,
    pub label: String,
}

fn parse_err(path: &Path, reason: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn save_checkpoint(model: &Model, step: usize, label: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let meta = CheckpointMeta {
        config: model.config.clone(),
        step,
        label: label.to_string(),
    };
    let (dtype, st_dtype) = match model.dtype() {
        DType::F64 => (DType::F64, Dtype::F64),
        _ => (DType::F32, Dtype::F32),
    };
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(model.store.len());
    for (name, var) in model.store.iter() {
        let t = var.as_tensor().to_dtype(dtype)?.flatten_all()?;
        let bytes: Vec<u8> = match dtype {
            DType::F64 => t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            _ => t.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        buffers.push((name.clone(), var.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(st_dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| parse_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| parse_err(path, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads only the metadata of a checkpoint.
pub fn read_checkpoint_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    meta_from_bytes(path, &bytes)
}

fn meta_from_bytes(path: &Path, bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, metadata) = SafeTensors::read_metadata(bytes).map_err(|e| parse_err(path, e))?;
    let text = metadata
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| parse_err(path, "missing model metadata"))?;
    serde_json::from_str(text).map_err(|e| parse_err(path, e))
}

/// Rebuilds the model described by the checkpoint and loads every parameter,
/// checking names and shapes.
pub fn load_checkpoint(path: impl AsRef<Path>, dtype: DType) -> Result<(Model, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta = meta_from_bytes(path, &bytes)?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| parse_err(path, e))?;
    let model = Model::new(meta.config.clone(), dtype)?;

    let mut stored: Vec<String> = tensors.names().into_iter().map(str::to_string).collect();
    stored.sort();
    let expected: Vec<String> = model.store.iter().map(|(n, _)| n.clone()).collect();
    if stored != expected {
        let missing: Vec<&String> = expected.iter().filter(|n| !stored.contains(n)).collect();
        let extra: Vec<&String> = stored.iter().filter(|n| !expected.contains(n)).collect();
        return Err(Error::validation(format!(
            "checkpoint parameters do not match the model: missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for (name, var) in model.store.iter() {
        let view = tensors.tensor(name).map_err(|e| parse_err(path, e))?;
        if view.shape() != var.dims() {
            return Err(Error::validation(format!(
                "parameter '{name}' has shape {:?} in the checkpoint, model expects {:?}",
                view.shape(),
                var.dims()
            )));
        }
        let data = view.data();
        let t = match view.dtype() {
            Dtype::F64 => {
                let v: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            Dtype::F32 => {
                let v: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, view.shape(), &Device::Cpu)?
            }
            other => return Err(parse_err(path, format!("unsupported dtype {other:?} for '{name}'"))),
        };
        var.set(&t.to_dtype(dtype)?)?;
    }
    Ok((model, meta))
}
