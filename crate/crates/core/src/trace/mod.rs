//! Trace sets: in-memory representation, SCAT file format, preprocessing,
//! label derivation, windowing and shift augmentation.

mod augment;
mod format;
mod preprocess;
mod sbox;

pub use augment::{random_shift, shift_by};
pub use format::{
    load_traceset, read_header, read_traceset, save_traceset, write_traceset, ScatHeader,
};
pub use format::{
    FLAG_KEY, FLAG_LABELS, FLAG_MASKS, FLAG_PLAINTEXT, SCAT_HEADER_LEN, SCAT_MAGIC, SCAT_VERSION,
};
pub use preprocess::{standardize, PreprocessMode, PreprocessStats, DEFAULT_EPSILON};
pub use sbox::{aes_inv_sbox, aes_sbox, sbox_label, INV_SBOX, SBOX};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default AES state byte targeted by labels.
pub const DEFAULT_TARGET_BYTE: usize = 2;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic {0:?}, expected \"SCAT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported SCAT version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    TruncatedFile { expected: u64, actual: u64 },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("{0} metadata is missing")]
    MissingMetadata(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("trace set is empty")]
    EmptyTraceSet,
    #[error("preprocessing stats do not fit: {0}")]
    StatsMismatch(String),
    #[error("shift {max_shift} too large for {n_samples} samples")]
    ShiftTooLarge { max_shift: usize, n_samples: usize },
    #[error("window [{start}, {start}+{len}) out of bounds for {n_samples} samples")]
    OutOfBounds {
        start: usize,
        len: usize,
        n_samples: usize,
    },
    #[error("target byte {0} is not in 0..16")]
    TargetByte(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TraceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    I8,
    I16,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::I8 => 0,
            Dtype::I16 => 1,
            Dtype::F32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::I8),
            1 => Ok(Dtype::I16),
            2 => Ok(Dtype::F32),
            other => Err(TraceError::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::I8 => 1,
            Dtype::I16 => 2,
            Dtype::F32 => 4,
        }
    }
}

/// Row-major sample matrix in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    I8(Vec<i8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl Samples {
    pub fn dtype(&self) -> Dtype {
        match self {
            Samples::I8(_) => Dtype::I8,
            Samples::I16(_) => Dtype::I16,
            Samples::F32(_) => Dtype::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Samples::I8(v) => v.len(),
            Samples::I16(v) => v.len(),
            Samples::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get_f64(&self, idx: usize) -> f64 {
        match self {
            Samples::I8(v) => f64::from(v[idx]),
            Samples::I16(v) => f64::from(v[idx]),
            Samples::F32(v) => f64::from(v[idx]),
        }
    }

    fn select_columns(&self, n_rows: usize, n_cols: usize, start: usize, len: usize) -> Samples {
        fn pick<T: Copy>(
            v: &[T],
            n_rows: usize,
            n_cols: usize,
            start: usize,
            len: usize,
        ) -> Vec<T> {
            let mut out = Vec::with_capacity(n_rows * len);
            for r in 0..n_rows {
                out.extend_from_slice(&v[r * n_cols + start..r * n_cols + start + len]);
            }
            out
        }
        match self {
            Samples::I8(v) => Samples::I8(pick(v, n_rows, n_cols, start, len)),
            Samples::I16(v) => Samples::I16(pick(v, n_rows, n_cols, start, len)),
            Samples::F32(v) => Samples::F32(pick(v, n_rows, n_cols, start, len)),
        }
    }

    fn select_rows(&self, n_cols: usize, rows: &[usize]) -> Samples {
        fn pick<T: Copy>(v: &[T], n_cols: usize, rows: &[usize]) -> Vec<T> {
            let mut out = Vec::with_capacity(rows.len() * n_cols);
            for &r in rows {
                out.extend_from_slice(&v[r * n_cols..(r + 1) * n_cols]);
            }
            out
        }
        match self {
            Samples::I8(v) => Samples::I8(pick(v, n_cols, rows)),
            Samples::I16(v) => Samples::I16(pick(v, n_cols, rows)),
            Samples::F32(v) => Samples::F32(pick(v, n_cols, rows)),
        }
    }
}

/// Per-trace mask bytes, `len` bytes per trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masks {
    pub len: u8,
    pub data: Vec<u8>,
}

impl Masks {
    pub fn of(&self, trace: usize) -> &[u8] {
        let l = self.len as usize;
        &self.data[trace * l..(trace + 1) * l]
    }
}

/// Column-oriented per-trace metadata. Every present column has one entry
/// per trace.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceMeta {
    pub keys: Option<Vec<[u8; 16]>>,
    pub plaintexts: Option<Vec<[u8; 16]>>,
    pub masks: Option<Masks>,
    pub labels: Option<Vec<u8>>,
}

impl TraceMeta {
    fn check(&self, n: usize) -> Result<()> {
        let bad = |what: &str, len: usize| {
            Err(TraceError::ShapeMismatch(format!(
                "{what} has {len} entries for {n} traces"
            )))
        };
        if let Some(k) = &self.keys {
            if k.len() != n {
                return bad("keys", k.len());
            }
        }
        if let Some(p) = &self.plaintexts {
            if p.len() != n {
                return bad("plaintexts", p.len());
            }
        }
        if let Some(m) = &self.masks {
            if m.data.len() != n * m.len as usize {
                return bad("masks", m.data.len());
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return bad("labels", l.len());
            }
        }
        Ok(())
    }

    fn select_rows(&self, rows: &[usize]) -> TraceMeta {
        TraceMeta {
            keys: self
                .keys
                .as_ref()
                .map(|k| rows.iter().map(|&r| k[r]).collect()),
            plaintexts: self
                .plaintexts
                .as_ref()
                .map(|p| rows.iter().map(|&r| p[r]).collect()),
            masks: self.masks.as_ref().map(|m| Masks {
                len: m.len,
                data: rows.iter().flat_map(|&r| m.of(r).iter().copied()).collect(),
            }),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }
}

/// A matrix of `n_traces × n_samples` measurements plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    n_traces: usize,
    n_samples: usize,
    samples: Samples,
    pub meta: TraceMeta,
    pub stats: Option<PreprocessStats>,
}

impl TraceSet {
    pub fn new(
        n_traces: usize,
        n_samples: usize,
        samples: Samples,
        meta: TraceMeta,
    ) -> Result<Self> {
        if samples.len() != n_traces * n_samples {
            return Err(TraceError::ShapeMismatch(format!(
                "{} samples for a {n_traces}x{n_samples} matrix",
                samples.len()
            )));
        }
        if n_samples > u32::MAX as usize {
            return Err(TraceError::ShapeMismatch(format!(
                "{n_samples} samples per trace exceeds u32"
            )));
        }
        meta.check(n_traces)?;
        Ok(TraceSet {
            n_traces,
            n_samples,
            samples,
            meta,
            stats: None,
        })
    }

    /// Builds an `f32` set from rows.
    pub fn from_rows_f32(rows: &[Vec<f32>], meta: TraceMeta) -> Result<Self> {
        let n_samples = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_samples) {
            return Err(TraceError::ShapeMismatch("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        TraceSet::new(rows.len(), n_samples, Samples::F32(data), meta)
    }

    pub fn n_traces(&self) -> usize {
        self.n_traces
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn dtype(&self) -> Dtype {
        self.samples.dtype()
    }

    pub fn samples(&self) -> &Samples {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.n_traces == 0
    }

    #[inline]
    pub fn value(&self, trace: usize, sample: usize) -> f64 {
        self.samples.get_f64(trace * self.n_samples + sample)
    }

    /// Copies trace `i` into `out`, converting to `f64`.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        (0..self.n_samples).map(|t| self.value(i, t)).collect()
    }

    pub fn labels(&self) -> Result<&[u8]> {
        self.meta
            .labels
            .as_deref()
            .ok_or(TraceError::MissingMetadata("labels"))
    }

    pub fn plaintexts(&self) -> Result<&[[u8; 16]]> {
        self.meta
            .plaintexts
            .as_deref()
            .ok_or(TraceError::MissingMetadata("plaintext"))
    }

    pub fn keys(&self) -> Result<&[[u8; 16]]> {
        self.meta
            .keys
            .as_deref()
            .ok_or(TraceError::MissingMetadata("key"))
    }

    /// Trace set restricted to samples `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<TraceSet> {
        if start
            .checked_add(len)
            .is_none_or(|end| end > self.n_samples)
        {
            return Err(TraceError::OutOfBounds {
                start,
                len,
                n_samples: self.n_samples,
            });
        }
        Ok(TraceSet {
            n_traces: self.n_traces,
            n_samples: len,
            samples: self
                .samples
                .select_columns(self.n_traces, self.n_samples, start, len),
            meta: self.meta.clone(),
            stats: None,
        })
    }

    /// Trace set made of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> TraceSet {
        TraceSet {
            n_traces: rows.len(),
            n_samples: self.n_samples,
            samples: self.samples.select_rows(self.n_samples, rows),
            meta: self.meta.select_rows(rows),
            stats: self.stats.clone(),
        }
    }

    /// Recomputes labels as `SBox(plaintext[target_byte] ^ key[target_byte])`.
    pub fn derive_labels(&self, target_byte: usize) -> Result<TraceSet> {
        if target_byte >= 16 {
            return Err(TraceError::TargetByte(target_byte));
        }
        let keys = self.keys()?;
        let pts = self.plaintexts()?;
        let labels = keys
            .iter()
            .zip(pts)
            .map(|(k, p)| sbox_label(p[target_byte], k[target_byte]))
            .collect();
        let mut out = self.clone();
        out.meta.labels = Some(labels);
        Ok(out)
    }
}

/// Free-function form of [`TraceSet::window`].
pub fn window(ts: &TraceSet, start: usize, len: usize) -> Result<TraceSet> {
    ts.window(start, len)
}

/// Free-function form of [`TraceSet::derive_labels`].
pub fn derive_labels(ts: &TraceSet, target_byte: usize) -> Result<TraceSet> {
    ts.derive_labels(target_byte)
}
