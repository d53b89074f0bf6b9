//! Checkpoint format: a directory holding `manifest.json` (config plus the
//! name, shape, byte offset and element count of every tensor) and
//! `weights.bin`, the tensors concatenated as little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "cultlab-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    blob_bytes: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn encode(model: &Model) -> (String, Vec<u8>) {
    let mut blob = Vec::with_capacity(model.config.param_count() * 8);
    let mut tensors = Vec::new();
    for id in model.config.param_ids() {
        let t = model.param(id);
        tensors.push(TensorEntry {
            name: id.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            len: t.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: model.config.clone(),
        blob_bytes: blob.len(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    (text + "\n", blob)
}

pub(super) fn content_hash(model: &Model) -> String {
    let (manifest, blob) = encode(model);
    let mut h = Sha256::new();
    h.update(manifest.as_bytes());
    h.update(&blob);
    hex::encode(&h.finalize()[..8])
}

/// Writes `dir/manifest.json` and `dir/weights.bin`, creating `dir` if needed.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = encode(model);
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(WEIGHTS_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Corruption(format!("manifest unreadable: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Corruption(format!("unknown format '{}'", manifest.format)));
    }
    let bpath = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Corruption(format!(
            "weights blob has {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let cfg = manifest.config;
    cfg.validate()?;
    let mut params = BTreeMap::new();
    for entry in &manifest.tensors {
        let corrupt = |why: &str| Error::Corruption(format!("tensor '{}': {why}", entry.name));
        let id: ParamId = entry.name.parse().map_err(|_| corrupt("unknown name"))?;
        let expected = cfg.param_shape(id);
        if entry.shape != expected {
            return Err(corrupt(&format!(
                "shape {:?} does not match config shape {:?}",
                entry.shape, expected
            )));
        }
        if entry.len != expected.iter().product::<usize>() {
            return Err(corrupt("element count does not match shape"));
        }
        let end = entry.offset + entry.len * 8;
        if end > blob.len() {
            return Err(corrupt("extends past the end of the blob"));
        }
        let data: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| corrupt(&e.to_string()))?;
        if params.insert(id, t).is_some() {
            return Err(corrupt("listed twice"));
        }
    }
    if let Some(missing) = cfg.param_ids().into_iter().find(|id| !params.contains_key(id)) {
        return Err(Error::Corruption(format!("tensor '{missing}' missing from manifest")));
    }
    Model::from_params(cfg, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::NeuronMask;

    fn model() -> Model {
        let mut cfg = ModelConfig::desk(20, 6);
        cfg.hidden_size = 8;
        cfg.num_heads = 2;
        cfg.head_dim = 4;
        cfg.num_kv_heads = 1;
        cfg.intermediate_size = 12;
        cfg.num_layers = 2;
        Model::init_with_std(cfg, 9, 0.3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
        let none = NeuronMask::empty();
        let a = m.forward(&[1, 2, 3], &none, false).unwrap();
        let b = back.forward(&[1, 2, 3], &none, false).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.logits), bits(&b.logits));
    }

    #[test]
    fn truncated_blob_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let bpath = dir.path().join(WEIGHTS_FILE);
        let mut blob = fs::read(&bpath).unwrap();
        blob.truncate(blob.len() - 16);
        fs::write(&bpath, blob).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Corruption(_))));
    }

    #[test]
    fn wrong_shape_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap();
        let mut manifest: Manifest = serde_json::from_str(&text).unwrap();
        let entry = manifest
            .tensors
            .iter_mut()
            .find(|t| t.name == "layers.1.gate")
            .unwrap();
        entry.shape = vec![8, 12];
        fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Corruption(_)));
        assert!(err.to_string().contains("layers.1.gate"), "{err}");
    }
}
