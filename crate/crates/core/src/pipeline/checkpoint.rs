//! Checkpoint directory: `checkpoint.json`, `params/<name>.tsr`,
//! `opt/<name>.m.tsr` and `opt/<name>.v.tsr`, each blob pinned by SHA-256.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::Model;
use super::train::{StepLosses, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::numerics::{tsr, Adam, DType, Real, Tensor};

pub const MANIFEST: &str = "checkpoint.json";
pub const FORMAT_VERSION: u32 = 1;
/// Number of trailing loss records kept in the manifest.
pub const LOSS_TAIL: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub dtype: DType,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub step: usize,
    pub adam_step: u64,
    pub loss_tail: Vec<StepLosses>,
    /// Relative blob path → hex SHA-256.
    pub blobs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_blob<T: Real>(
    dir: &Path,
    rel: String,
    t: &Tensor<T>,
    blobs: &mut BTreeMap<String, String>,
) -> Result<()> {
    let bytes = tsr::encode(t);
    let path = dir.join(&rel);
    std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    blobs.insert(rel, sha256_hex(&bytes));
    Ok(())
}

fn read_blob<T: Real>(
    dir: &Path,
    rel: &str,
    blobs: &BTreeMap<String, String>,
) -> Result<Tensor<T>> {
    let expected = blobs
        .get(rel)
        .ok_or_else(|| Error::Checkpoint(format!("manifest does not list {rel}")))?;
    let path = dir.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let actual = sha256_hex(&bytes);
    if &actual != expected {
        return Err(Error::Checkpoint(format!(
            "hash mismatch for {rel}: manifest {expected}, file {actual}"
        )));
    }
    Ok(tsr::decode(&bytes)?.into_real())
}

/// Writes the trainer's parameters, optimizer moments and manifest to `dir`.
pub fn save_checkpoint<T: Real>(trainer: &Trainer<T>, dir: &Path) -> Result<CheckpointManifest> {
    for sub in ["params", "opt"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut blobs = BTreeMap::new();
    let opt = &trainer.optimizer;
    for (id, p) in trainer.model.store.iter() {
        write_blob(dir, format!("params/{}.tsr", p.name), &p.value, &mut blobs)?;
        write_blob(
            dir,
            format!("opt/{}.m.tsr", p.name),
            &opt.m[id.0],
            &mut blobs,
        )?;
        write_blob(
            dir,
            format!("opt/{}.v.tsr", p.name),
            &opt.v[id.0],
            &mut blobs,
        )?;
    }
    let tail_start = trainer.history.len().saturating_sub(LOSS_TAIL);
    let manifest = CheckpointManifest {
        format: FORMAT_VERSION,
        dtype: T::DTYPE,
        train: trainer.config.clone(),
        init_seed: trainer.model.init_seed,
        step: trainer.step,
        adam_step: opt.step,
        loss_tail: trainer.history[tail_start..].to_vec(),
        blobs,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Rebuilds a trainer from `dir`, verifying every blob hash. Values stored in
/// another precision are converted.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Trainer<T>> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::<T>::new(&manifest.train.model, manifest.init_seed)?;
    let mut optimizer = Adam::new(manifest.train.adam, &model.store);
    let expected = 3 * model.store.len();
    if manifest.blobs.len() != expected {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} blobs, model needs {expected}",
            manifest.blobs.len()
        )));
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.get(id).name.clone();
        let shape = model.store.get(id).value.shape().to_vec();
        let value: Tensor<T> = read_blob(dir, &format!("params/{name}.tsr"), &manifest.blobs)?;
        let m: Tensor<T> = read_blob(dir, &format!("opt/{name}.m.tsr"), &manifest.blobs)?;
        let v: Tensor<T> = read_blob(dir, &format!("opt/{name}.v.tsr"), &manifest.blobs)?;
        for t in [&value, &m, &v] {
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model shape {shape:?}",
                    t.shape()
                )));
            }
        }
        model.store.get_mut(id).value = value;
        optimizer.m[id.0] = m;
        optimizer.v[id.0] = v;
    }
    optimizer.step = manifest.adam_step;
    Ok(Trainer {
        config: manifest.train.clone(),
        model,
        optimizer,
        step: manifest.step,
        history: manifest.loss_tail.clone(),
    })
}
