//! Synthetic first-order boolean-masked AES S-box leakage.
//!
//! Each trace is i.i.d. Gaussian noise plus two Hamming-weight leaks: the
//! masked S-box output `SBox(p ^ k) ^ m` at one sample and the mask `m` at
//! another. Neither sample alone depends on the label; their combination
//! does.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::trace::{self, Masks, Samples, TraceMeta, TraceSet, DEFAULT_TARGET_BYTE};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
}

/// Number of set bits.
#[inline]
pub fn hamming_weight(x: u8) -> u32 {
    x.count_ones()
}

/// 16-byte AES key, serialized as a hex string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Key16(pub [u8; 16]);

impl Serialize for Key16 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Key16 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("key must be 16 bytes (32 hex digits)"))?;
        Ok(Key16(arr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyMode {
    Fixed(Key16),
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_traces: usize,
    pub n_samples: usize,
    /// Noise standard deviation, in trace units.
    pub sigma: f64,
    pub leak_pos_masked: usize,
    pub leak_pos_mask: usize,
    #[serde(default)]
    pub max_desync: usize,
    pub key_mode: KeyMode,
    #[serde(default = "default_target_byte")]
    pub target_byte: usize,
    /// Force the mask to zero, leaving a first-order leak of the label.
    #[serde(default)]
    pub unprotected: bool,
    pub seed: u64,
}

fn default_target_byte() -> usize {
    DEFAULT_TARGET_BYTE
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_samples < 2 {
            return bad(format!("need at least 2 samples, got {}", self.n_samples));
        }
        if self.leak_pos_masked >= self.n_samples || self.leak_pos_mask >= self.n_samples {
            return bad(format!(
                "leak positions {} / {} outside {} samples",
                self.leak_pos_masked, self.leak_pos_mask, self.n_samples
            ));
        }
        if self.leak_pos_masked == self.leak_pos_mask {
            return bad("leak positions must be distinct".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        if self.max_desync > 0 && 4 * self.max_desync >= self.n_samples {
            return bad(format!(
                "max_desync {} must be < n_samples/4",
                self.max_desync
            ));
        }
        if self.target_byte >= 16 {
            return bad(format!("target byte {} not in 0..16", self.target_byte));
        }
        Ok(())
    }
}

struct Row {
    samples: Vec<f32>,
    key: [u8; 16],
    plaintext: [u8; 16],
    mask: u8,
}

fn gen_row(cfg: &SynthConfig, noise: &Normal<f64>, i: usize) -> Row {
    let mut rng = rng::substream(cfg.seed, "synth", i as u64);
    let plaintext: [u8; 16] = rng.random();
    let key = match cfg.key_mode {
        KeyMode::Fixed(k) => k.0,
        KeyMode::Random => rng.random(),
    };
    let mask: u8 = rng.random();
    let mask = if cfg.unprotected { 0 } else { mask };
    let mut samples: Vec<f64> = (0..cfg.n_samples).map(|_| noise.sample(&mut rng)).collect();
    let tb = cfg.target_byte;
    let label = trace::sbox_label(plaintext[tb], key[tb]);
    samples[cfg.leak_pos_masked] += f64::from(hamming_weight(label ^ mask));
    samples[cfg.leak_pos_mask] += f64::from(hamming_weight(mask));
    if cfg.max_desync > 0 {
        let m = cfg.max_desync as i64;
        samples = trace::shift_by(&samples, rng.random_range(-m..=m) as isize);
    }
    Row {
        samples: samples.into_iter().map(|x| x as f32).collect(),
        key,
        plaintext,
        mask,
    }
}

/// Generates `cfg.n_traces` traces; deterministic in `cfg.seed` and
/// independent of the thread count.
pub fn generate(cfg: &SynthConfig) -> Result<TraceSet, SynthError> {
    cfg.validate()?;
    let noise =
        Normal::new(0.0, cfg.sigma).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let rows: Vec<Row> = (0..cfg.n_traces)
        .into_par_iter()
        .map(|i| gen_row(cfg, &noise, i))
        .collect();
    let n = rows.len();
    let mut data = Vec::with_capacity(n * cfg.n_samples);
    let mut keys = Vec::with_capacity(n);
    let mut pts = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for r in rows {
        data.extend_from_slice(&r.samples);
        labels.push(trace::sbox_label(
            r.plaintext[cfg.target_byte],
            r.key[cfg.target_byte],
        ));
        keys.push(r.key);
        pts.push(r.plaintext);
        masks.push(r.mask);
    }
    let meta = TraceMeta {
        keys: Some(keys),
        plaintexts: Some(pts),
        masks: Some(Masks {
            len: 1,
            data: masks,
        }),
        labels: Some(labels),
    };
    TraceSet::new(n, cfg.n_samples, Samples::F32(data), meta)
        .map_err(|e| SynthError::InvalidConfig(e.to_string()))
}
