//! Checkpoint directory: `manifest.json` (format version, config, tensor
//! registry) plus `weights.bin`, all tensors as little-endian `f64` in
//! registry order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CadModel, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset into the weight blob.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    scalar: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    blob_bytes: u64,
}

pub fn save_checkpoint<T: Scalar>(model: &CadModel<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.params.n_scalars() * 8);
    let mut tensors = Vec::new();
    for (name, m) in model.params.named() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            offset: blob.len() as u64,
        });
        for x in m.as_slice() {
            blob.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        scalar: T::NAME.to_string(),
        config: model.config.clone(),
        tensors,
        blob_bytes: blob.len() as u64,
    };
    let weights = dir.join(WEIGHTS);
    fs::write(&weights, &blob).map_err(|e| Error::io(&weights, e))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<CadModel<T>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest {}: {e}", path.display())))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    manifest
        .config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest config: {e}")))?;

    let weights = dir.join(WEIGHTS);
    let blob = fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "truncated weights: {} holds {} bytes, manifest declares {}",
            weights.display(),
            blob.len(),
            manifest.blob_bytes
        )));
    }

    let layout = ModelParams::layout(&manifest.config);
    let expected = layout.named();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} architecture has {} tensors, manifest lists {}",
            manifest.config.architecture,
            expected.len(),
            manifest.tensors.len()
        )));
    }
    let mut k = 0;
    let params = layout.try_map(|name, &(rows, cols)| {
        let entry = &manifest.tensors[k];
        k += 1;
        if entry.name != name {
            return Err(Error::Checkpoint(format!(
                "tensor registry out of order: expected {name}, found {}",
                entry.name
            )));
        }
        if (entry.rows, entry.cols) != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: manifest shape {}x{} does not match config shape {rows}x{cols}",
                entry.rows, entry.cols
            )));
        }
        let start = entry.offset as usize;
        let end = start + rows * cols * 8;
        let bytes = blob.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("truncated weights: tensor {name} needs bytes {start}..{end}"))
        })?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        Matrix::from_vec(rows, cols, data)
    })?;
    CadModel::from_parts(manifest.config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn cfg(arch: Architecture) -> ModelConfig {
        ModelConfig {
            d_a: 4,
            d_t: 3,
            d_q: 2,
            d_v: 2,
            d_b: 2,
            fcn_hidden: 3,
            architecture: arch,
            seed: 1,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for arch in Architecture::ALL {
            let model = CadModel::<f64>::new(cfg(arch)).unwrap();
            let path = dir.path().join(arch.tag());
            save_checkpoint(&model, &path).unwrap();
            let back = load_checkpoint::<f64>(&path).unwrap();
            assert_eq!(back, model);
            assert_eq!(back.architecture(), arch);
        }
    }

    #[test]
    fn wrong_shape_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let model = CadModel::<f64>::new(cfg(Architecture::FullMultimodal)).unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        manifest["tensors"][1]["rows"] = 7.into();
        fs::write(&path, manifest.to_string()).unwrap();
        let err = load_checkpoint::<f64>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("attention.w_t"), "{err}");
    }

    #[test]
    fn truncated_blob_and_bad_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = CadModel::<f64>::new(cfg(Architecture::TextOnly)).unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let weights = dir.path().join(WEIGHTS);
        let mut blob = fs::read(&weights).unwrap();
        blob.truncate(blob.len() - 8);
        fs::write(&weights, &blob).unwrap();
        let err = load_checkpoint::<f64>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        save_checkpoint(&model, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&path, text).unwrap();
        let err = load_checkpoint::<f64>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        fs::write(&path, "{ not json").unwrap();
        let err = load_checkpoint::<f64>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("corrupt manifest"), "{err}");
    }
}
