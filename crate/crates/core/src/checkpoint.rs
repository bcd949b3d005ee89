//! Checkpoint persistence.
//!
//! A checkpoint directory holds `manifest.json` (parameter name → shape,
//! dtype, byte offset and length, plus the optimizer step), `params.bin`
//! (concatenated little-endian IEEE-754 values), `optimizer.bin` (first and
//! second Adam moments in the same layout), `config.json` (the run config
//! snapshot) and `vocab.json`. Loading reproduces forward outputs
//! bit-identically at the same precision.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::scalar::{Dtype, Scalar};
use crate::tape::ParamSet;
use crate::tensor::Array;
use crate::train::RunConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Byte offset into `params.bin`.
    pub offset: usize,
    /// Byte length in `params.bin`.
    pub length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: Dtype,
    pub params: BTreeMap<String, ManifestEntry>,
    pub optimizer_step: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

fn blob_of<'a, T: Scalar>(arrays: impl Iterator<Item = &'a Array<T>>) -> Vec<u8> {
    let mut blob = Vec::new();
    for a in arrays {
        for &v in a.data() {
            v.write_le(&mut blob);
        }
    }
    blob
}

/// Write a checkpoint directory.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    model: &Model<T>,
    adam: &Adam<T>,
    config: &RunConfig,
    vocab: &Vocab,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        dtype: T::DTYPE,
        params: BTreeMap::new(),
        optimizer_step: adam.step_count(),
        adam_beta1: adam.beta1,
        adam_beta2: adam.beta2,
        adam_eps: adam.eps,
    };
    let mut offset = 0usize;
    for (_, p) in model.params.iter() {
        let length = p.value.numel() * T::BYTES;
        manifest.params.insert(
            p.name.clone(),
            ManifestEntry { shape: p.value.shape().to_vec(), dtype: T::DTYPE, offset, length },
        );
        offset += length;
    }
    let params_blob = blob_of(model.params.iter().map(|(_, p)| &p.value));
    let (m, v) = adam.moments();
    let mut opt_blob = blob_of(m.iter());
    opt_blob.extend(blob_of(v.iter()));

    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join("params.bin"), params_blob)?;
    std::fs::write(dir.join("optimizer.bin"), opt_blob)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    std::fs::write(dir.join("vocab.json"), serde_json::to_string(vocab)?)?;
    Ok(())
}

/// Peek at the stored precision without loading tensors.
pub fn checkpoint_dtype(dir: &Path) -> Result<Dtype> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    Ok(manifest.dtype)
}

fn read_array<T: Scalar>(blob: &[u8], entry: &ManifestEntry) -> Result<Array<T>> {
    let end = entry.offset + entry.length;
    if end > blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob too short: need {end} bytes, have {}",
            blob.len()
        )));
    }
    let bytes = &blob[entry.offset..end];
    if !bytes.len().is_multiple_of(T::BYTES) {
        return Err(Error::Checkpoint("byte length not a multiple of the element size".into()));
    }
    let data: Vec<T> = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Array::new(entry.shape.clone(), data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
}

/// Load a checkpoint saved at precision `T`.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Model<T>, Adam<T>, RunConfig, Vocab)> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision {} does not match requested {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let config: RunConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
    let mut vocab: Vocab = serde_json::from_str(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
    vocab.rebuild_index();

    let mut model = Model::<T>::new(config.model.clone(), 0)?;
    let params_blob = std::fs::read(dir.join("params.bin"))?;
    restore_params(&mut model.params, &manifest, &params_blob)?;

    let mut adam = Adam::new(&model.params);
    adam.beta1 = manifest.adam_beta1;
    adam.beta2 = manifest.adam_beta2;
    adam.eps = manifest.adam_eps;
    let opt_blob = std::fs::read(dir.join("optimizer.bin"))?;
    let per_param: usize = manifest.params.values().map(|e| e.length).sum();
    if opt_blob.len() != 2 * per_param {
        return Err(Error::Checkpoint(format!(
            "optimizer blob is {} bytes, expected {}",
            opt_blob.len(),
            2 * per_param
        )));
    }
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (_, p) in model.params.iter() {
        let entry = manifest
            .params
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {} missing", p.name)))?;
        m.push(read_array::<T>(&opt_blob[..per_param], entry)?);
        v.push(read_array::<T>(&opt_blob[per_param..], entry)?);
    }
    adam.restore(m, v, manifest.optimizer_step)?;
    Ok((model, adam, config, vocab))
}

fn restore_params<T: Scalar>(
    params: &mut ParamSet<T>,
    manifest: &Manifest,
    blob: &[u8],
) -> Result<()> {
    if manifest.params.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            manifest.params.len(),
            params.len()
        )));
    }
    for (_, p) in params.iter_mut() {
        let entry = manifest
            .params
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {} missing", p.name)))?;
        if entry.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} shape {:?} does not match {:?}",
                p.name,
                entry.shape,
                p.value.shape()
            )));
        }
        p.value = read_array::<T>(blob, entry)?;
    }
    Ok(())
}
