//! Interface to the external HDF5-to-SCAT converter.
//!
//! The converter itself is a separate Python tool (`ascad2scat`). This
//! module fixes the contract between the two sides: the job description it
//! accepts, the JSON summary it prints, and the strict comparison used to
//! verify a conversion. Dtype is part of the contract, so an `i8` set and an
//! `f32` copy with equal values do not match.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Dtype, TraceSet};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("missing datasets: {}", .0.join(", "))]
    MissingDataset(Vec<String>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mismatch at trace {index}: {field}")]
    Mismatch { index: usize, field: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestGroup {
    Profiling,
    Attack,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestJob {
    pub input: PathBuf,
    pub group: IngestGroup,
    pub output: PathBuf,
    /// Half-open sample range `[start, end)`.
    #[serde(default)]
    pub window: Option<(usize, usize)>,
    #[serde(default)]
    pub limit: Option<usize>,
}

impl IngestJob {
    /// Checks the window against the dataset's trace length.
    pub fn validate(&self, dataset_samples: usize) -> Result<(), IngestError> {
        match self.window {
            Some((a, b)) if a >= b || b > dataset_samples => Err(IngestError::ShapeMismatch(
                format!("window {a}:{b} outside {dataset_samples} samples"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub n_traces: usize,
    pub n_samples: usize,
    pub dtype: Dtype,
}

impl IngestSummary {
    pub fn of(ts: &TraceSet) -> Self {
        IngestSummary {
            n_traces: ts.n_traces(),
            n_samples: ts.n_samples(),
            dtype: ts.dtype(),
        }
    }
}

/// First difference between a converted set and its reference, comparing
/// shape, dtype, every sample and every metadata field.
pub fn first_mismatch(converted: &TraceSet, reference: &TraceSet) -> Result<(), IngestError> {
    if IngestSummary::of(converted) != IngestSummary::of(reference) {
        return Err(IngestError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            IngestSummary::of(converted),
            IngestSummary::of(reference)
        )));
    }
    let (a, b) = (&converted.meta, &reference.meta);
    let presence = [
        ("keys", a.keys.is_some(), b.keys.is_some()),
        ("plaintexts", a.plaintexts.is_some(), b.plaintexts.is_some()),
        ("masks", a.masks.is_some(), b.masks.is_some()),
        ("labels", a.labels.is_some(), b.labels.is_some()),
    ];
    if let Some((name, ..)) = presence.iter().find(|(_, x, y)| x != y) {
        return Err(IngestError::ShapeMismatch(format!(
            "{name} present on one side only"
        )));
    }
    let s = converted.n_samples();
    for i in 0..converted.n_traces() {
        let mismatch = |field: &str| {
            Err(IngestError::Mismatch {
                index: i,
                field: field.to_string(),
            })
        };
        if (0..s).any(|t| converted.value(i, t).to_bits() != reference.value(i, t).to_bits()) {
            return mismatch("samples");
        }
        if a.keys.as_ref().map(|k| k[i]) != b.keys.as_ref().map(|k| k[i]) {
            return mismatch("key");
        }
        if a.plaintexts.as_ref().map(|p| p[i]) != b.plaintexts.as_ref().map(|p| p[i]) {
            return mismatch("plaintext");
        }
        if a.masks.as_ref().map(|m| m.of(i)) != b.masks.as_ref().map(|m| m.of(i)) {
            return mismatch("masks");
        }
        if a.labels.as_ref().map(|l| l[i]) != b.labels.as_ref().map(|l| l[i]) {
            return mismatch("label");
        }
    }
    Ok(())
}
