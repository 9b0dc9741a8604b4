//! Model checkpoints: a named-tensor container plus a JSON manifest.

use std::path::{Path, PathBuf};

use cardiocap_tensor::{io, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub phase: String,
    pub epoch: usize,
    pub val_metric: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

/// Sidecar path of the manifest belonging to `tensors`.
pub fn manifest_path(tensors: &Path) -> PathBuf {
    tensors.with_extension("json")
}

/// Writes every tensor of `stores` (parameters and buffers) into one
/// container, followed by the manifest. Names must not collide.
pub fn save<T: Scalar>(path: &Path, stores: &[&ParamStore<T>], manifest: &Manifest) -> Result<()> {
    let mut all = indexmap::IndexMap::new();
    for store in stores {
        for (name, t) in store.to_tensor_map() {
            if all.insert(name.clone(), t).is_some() {
                return Err(Error::Invariant(format!("tensor {name} appears in two stores")));
            }
        }
    }
    io::save(path, &all)?;
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::format(&mpath, e.to_string()))?;
    std::fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))
}

/// Copies checkpoint tensors into `store` for every name that exists in
/// both and passes `filter`. Shapes must agree; at least one tensor must
/// be restored. Returns the number of tensors copied.
pub fn restore<T: Scalar>(path: &Path, store: &mut ParamStore<T>, filter: impl Fn(&str) -> bool) -> Result<usize> {
    let tensors: indexmap::IndexMap<String, Tensor<T>> = io::load(path)?;
    let mut copied = 0;
    for (name, t) in tensors {
        if !filter(&name) || !store.contains(&name) {
            continue;
        }
        let want = store.tensor(&name)?.shape().to_vec();
        if want != t.shape() {
            return Err(Error::Compatibility(format!("{}: {name} has shape {:?} but the model expects {want:?}", path.display(), t.shape())));
        }
        store.set(&name, t)?;
        copied += 1;
    }
    if copied == 0 {
        return Err(Error::Compatibility(format!("{} holds no tensors for this model", path.display())));
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        Manifest { phase: "pretrain-decoder".into(), epoch: 3, val_metric: Some(0.5), config_hash: "abc".into(), seed: 7 }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tensors");
        let mut store = ParamStore::<f32>::new();
        store.insert("dec.w", Tensor::full(&[2, 3], 1.5));
        store.insert_buffer("enc.bn1.running_mean", Tensor::full(&[3], 0.25));
        save(&path, &[&store], &manifest()).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), manifest());

        let mut fresh = ParamStore::<f32>::new();
        fresh.insert("dec.w", Tensor::zeros(&[2, 3]));
        fresh.insert_buffer("enc.bn1.running_mean", Tensor::zeros(&[3]));
        fresh.insert("dec.head.en.w", Tensor::zeros(&[1]));
        assert_eq!(restore(&path, &mut fresh, |_| true).unwrap(), 2);
        assert_eq!(fresh.tensor("dec.w").unwrap().data(), &[1.5; 6]);
        assert!(!fresh.get("enc.bn1.running_mean").unwrap().requires_grad());
    }

    #[test]
    fn shape_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tensors");
        let mut store = ParamStore::<f64>::new();
        store.insert("dec.w", Tensor::zeros(&[2, 3]));
        save(&path, &[&store], &manifest()).unwrap();
        let mut other = ParamStore::<f64>::new();
        other.insert("dec.w", Tensor::zeros(&[3, 2]));
        assert!(matches!(restore(&path, &mut other, |_| true), Err(Error::Compatibility(_))));
        let mut unrelated = ParamStore::<f64>::new();
        unrelated.insert("x", Tensor::zeros(&[1]));
        assert!(matches!(restore(&path, &mut unrelated, |_| true), Err(Error::Compatibility(_))));
    }
}
