//! Checkpoints: a directory holding `manifest.json` and `tensors.bin`.
//!
//! The blob is the concatenation of every tensor in lexicographic name
//! order, little-endian in the model's precision. Tensor names are
//! `param/<name>`, `bn/<layer>.running_mean|running_var`,
//! `opt/<slot>/<name>` and `swa/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainError, TrainState};
use crate::nn::{build_model, ModelConfig, Precision, Scalar, Tensor};
use crate::optim::{Ema, OptState, OptimizerKind, SwaState};

pub const CHECKPOINT_FORMAT: &str = "scaforge-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub precision: Precision,
    /// SHA-256 of the architecture (input width and layers).
    pub config_hash: String,
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub epoch: usize,
    pub step: usize,
    pub opt_t: u64,
    pub ema: Ema,
    pub swa_models: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of the architecture; the display name does not count.
pub fn config_hash(config: &ModelConfig) -> String {
    let arch = ModelConfig {
        name: None,
        ..config.clone()
    };
    hex::encode(Sha256::digest(arch.to_json().as_bytes()))
}

fn opt_slot_name(kind: &OptimizerKind, slot: usize) -> &'static str {
    match (kind, slot) {
        (OptimizerKind::Adam { .. }, 0) => "m",
        _ => "v",
    }
}

fn collect<T: Scalar>(state: &TrainState<T>) -> BTreeMap<String, (Vec<usize>, Vec<T>)> {
    let mut out = BTreeMap::new();
    let model = &state.model;
    for (name, p) in model.param_names().iter().zip(model.params()) {
        out.insert(
            format!("param/{name}"),
            (p.shape().to_vec(), p.data().to_vec()),
        );
    }
    for (name, bn) in model.bn_names().iter().zip(model.bn_state()) {
        let ch = bn.running_mean.len();
        out.insert(
            format!("bn/{name}.running_mean"),
            (vec![ch], bn.running_mean.clone()),
        );
        out.insert(
            format!("bn/{name}.running_var"),
            (vec![ch], bn.running_var.clone()),
        );
    }
    for (name, slots) in model.param_names().iter().zip(&state.opt.slots) {
        for (i, t) in slots.iter().enumerate() {
            let slot = opt_slot_name(&state.optimizer, i);
            out.insert(
                format!("opt/{slot}/{name}"),
                (t.shape().to_vec(), t.data().to_vec()),
            );
        }
    }
    if let Some(swa) = state.swa.as_ref().filter(|s| s.n_models > 0) {
        for (name, t) in model.param_names().iter().zip(&swa.averaged) {
            out.insert(
                format!("swa/{name}"),
                (t.shape().to_vec(), t.data().to_vec()),
            );
        }
    }
    out
}

/// Writes `state` to the directory `dir`, creating it if needed.
pub fn checkpoint_save<T: Scalar>(
    state: &TrainState<T>,
    dir: impl AsRef<Path>,
) -> Result<(), TrainError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, (shape, data)) in collect(state) {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: blob.len(),
        });
        for v in data {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        precision: T::PRECISION,
        config_hash: config_hash(state.model.config()),
        model: state.model.config().clone(),
        optimizer: state.optimizer,
        epoch: state.epoch,
        step: state.step,
        opt_t: state.opt.t,
        ema: state.ema,
        swa_models: state.swa.as_ref().map(|s| s.n_models),
        tensors,
    };
    fs::write(dir.join(BLOB), blob)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST), json)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest, TrainError> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(TrainError::CorruptCheckpoint(format!(
            "unsupported format {} v{}",
            m.format, m.version
        )));
    }
    if config_hash(&m.model) != m.config_hash {
        return Err(TrainError::CorruptCheckpoint(
            "config hash does not match the stored model".into(),
        ));
    }
    Ok(m)
}

/// Precision of the tensors stored in a checkpoint.
pub fn read_manifest_precision(dir: impl AsRef<Path>) -> Result<Precision, TrainError> {
    Ok(read_manifest(dir)?.precision)
}

/// Restores a training state. With `expected`, the stored architecture must
/// hash to the same value or [`TrainError::ManifestMismatch`] is returned.
pub fn checkpoint_load<T: Scalar>(
    dir: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<TrainState<T>, TrainError> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    if let Some(cfg) = expected {
        let want = config_hash(cfg);
        if want != m.config_hash {
            return Err(TrainError::ManifestMismatch(format!(
                "checkpoint architecture {} differs from configured {}",
                &m.config_hash[..12],
                &want[..12]
            )));
        }
    }
    if m.precision != T::PRECISION {
        return Err(TrainError::ManifestMismatch(format!(
            "checkpoint holds {:?} tensors, requested {:?}",
            m.precision,
            T::PRECISION
        )));
    }
    let blob = fs::read(dir.join(BLOB))?;

    let mut model = build_model::<T>(&m.model, 0)?;
    let mut opt = OptState::new(&m.optimizer, model.params());
    opt.t = m.opt_t;
    let mut swa = m.swa_models.map(|n| SwaState {
        averaged: Vec::new(),
        n_models: n,
    });
    if let Some(s) = swa.as_mut().filter(|s| s.n_models > 0) {
        s.averaged = model.params().to_vec();
    }
    let probe = TrainState {
        model: model.clone(),
        optimizer: m.optimizer,
        opt: opt.clone(),
        swa: swa.clone(),
        epoch: 0,
        step: 0,
        ema: m.ema,
    };
    let expected_entries = collect(&probe);
    let names: Vec<&String> = m.tensors.iter().map(|t| &t.name).collect();
    if names.len() != expected_entries.len()
        || names
            .iter()
            .zip(expected_entries.keys())
            .any(|(a, b)| *a != b)
    {
        return Err(TrainError::ManifestMismatch(
            "tensor list does not match the model and optimizer".into(),
        ));
    }

    let mut offset = 0;
    let mut values: BTreeMap<&str, Tensor<T>> = BTreeMap::new();
    for (entry, (shape, _)) in m.tensors.iter().zip(expected_entries.values()) {
        if &entry.shape != shape {
            return Err(TrainError::ManifestMismatch(format!(
                "{}: shape {:?}, model has {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.offset != offset {
            return Err(TrainError::CorruptCheckpoint(format!(
                "{}: offset {} expected {offset}",
                entry.name, entry.offset
            )));
        }
        let n: usize = shape.iter().product();
        let bytes = blob.get(offset..offset + n * T::BYTES).ok_or_else(|| {
            TrainError::CorruptCheckpoint(format!("blob truncated in {}", entry.name))
        })?;
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        values.insert(&entry.name, Tensor::from_vec(shape, data)?);
        offset += n * T::BYTES;
    }
    if offset != blob.len() {
        return Err(TrainError::CorruptCheckpoint(format!(
            "{} trailing blob bytes",
            blob.len() - offset
        )));
    }

    let mut take = |name: String| values.remove(name.as_str()).expect("name checked above");
    let names = model.param_names().to_vec();
    for (name, p) in names.iter().zip(model.params_mut()) {
        *p = take(format!("param/{name}"));
    }
    let bn_names = model.bn_names().to_vec();
    for (name, bn) in bn_names.iter().zip(model.bn_state_mut()) {
        bn.running_mean = take(format!("bn/{name}.running_mean")).into_data();
        bn.running_var = take(format!("bn/{name}.running_var")).into_data();
    }
    for (name, slots) in names.iter().zip(opt.slots.iter_mut()) {
        for (i, t) in slots.iter_mut().enumerate() {
            *t = take(format!("opt/{}/{name}", opt_slot_name(&m.optimizer, i)));
        }
    }
    if let Some(s) = swa.as_mut().filter(|s| s.n_models > 0) {
        s.averaged = names.iter().map(|n| take(format!("swa/{n}"))).collect();
    }
    Ok(TrainState {
        model,
        optimizer: m.optimizer,
        opt,
        swa,
        epoch: m.epoch,
        step: m.step,
        ema: m.ema,
    })
}
