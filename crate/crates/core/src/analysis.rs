//! Leakage analysis: first-order SNR, input-gradient saliency and CSV
//! export of per-sample series.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Mode, Model, NnError, Scalar, Tensor};
use crate::trace::{aes_sbox, TraceError, TraceSet};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("SNR needs at least two classes with two or more traces, found {0}")]
    InsufficientClasses(usize),
    #[error("{0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Intermediate value the traces are grouped by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Stored labels.
    Label,
    /// First mask byte.
    Mask,
    /// `SBox(p ^ k) ^ m` at the target byte.
    MaskedSbox,
    /// `SBox(p ^ k)` at the target byte, ignoring any mask.
    Sbox,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Label => "label",
            Partition::Mask => "mask",
            Partition::MaskedSbox => "masked_sbox",
            Partition::Sbox => "sbox",
        }
    }

    /// Class of every trace.
    pub fn classes(self, ts: &TraceSet, target_byte: usize) -> Result<Vec<u8>, AnalysisError> {
        if target_byte >= 16 {
            return Err(TraceError::TargetByte(target_byte).into());
        }
        let mask_of = |ts: &TraceSet| -> Result<Vec<u8>, TraceError> {
            let m = ts
                .meta
                .masks
                .as_ref()
                .ok_or(TraceError::MissingMetadata("masks"))?;
            Ok((0..ts.n_traces())
                .map(|i| m.of(i).first().copied().unwrap_or(0))
                .collect())
        };
        let sbox = |ts: &TraceSet| -> Result<Vec<u8>, TraceError> {
            let (p, k) = (ts.plaintexts()?, ts.keys()?);
            Ok(p.iter()
                .zip(k)
                .map(|(p, k)| aes_sbox(p[target_byte] ^ k[target_byte]))
                .collect())
        };
        Ok(match self {
            Partition::Label => ts.labels()?.to_vec(),
            Partition::Mask => mask_of(ts)?,
            Partition::Sbox => sbox(ts)?,
            Partition::MaskedSbox => sbox(ts)?
                .into_iter()
                .zip(mask_of(ts)?)
                .map(|(s, m)| s ^ m)
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub values: Vec<f64>,
    pub partition: String,
    pub class_counts: Vec<usize>,
    /// Some sample had zero within-class variance; its SNR is reported as 0.
    pub degenerate: bool,
}

impl SnrReport {
    pub fn argmax(&self) -> Option<usize> {
        (0..self.values.len())
            .max_by(|&a, &b| self.values[a].total_cmp(&self.values[b]).then(b.cmp(&a)))
    }
}

/// Per-sample first-order SNR: the (unweighted, population) variance of the
/// class means divided by the mean within-class variance. Only classes with
/// at least two traces take part.
pub fn snr(ts: &TraceSet, classes: &[u8], partition: &str) -> Result<SnrReport, AnalysisError> {
    let n = ts.n_traces();
    if classes.len() != n {
        return Err(AnalysisError::ShapeMismatch(format!(
            "{} classes for {n} traces",
            classes.len()
        )));
    }
    let mut counts = vec![0usize; 256];
    for &c in classes {
        counts[c as usize] += 1;
    }
    let used: Vec<usize> = (0..256).filter(|&c| counts[c] >= 2).collect();
    if used.len() < 2 {
        return Err(AnalysisError::InsufficientClasses(used.len()));
    }
    let n_used = used.len() as f64;

    const BLOCK: usize = 64;
    let w = ts.n_samples();
    let blocks: Vec<(Vec<f64>, bool)> = (0..w.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(w);
            let width = hi - lo;
            let mut sum = vec![0.0; 256 * width];
            for (i, &c) in classes.iter().enumerate() {
                let acc = &mut sum[c as usize * width..][..width];
                for (a, t) in acc.iter_mut().zip(lo..hi) {
                    *a += ts.value(i, t);
                }
            }
            let mut mean = sum;
            for c in 0..256 {
                if counts[c] > 0 {
                    mean[c * width..][..width]
                        .iter_mut()
                        .for_each(|m| *m /= counts[c] as f64);
                }
            }
            let mut m2 = vec![0.0; 256 * width];
            for (i, &c) in classes.iter().enumerate() {
                let c = c as usize;
                for (j, t) in (lo..hi).enumerate() {
                    let d = ts.value(i, t) - mean[c * width + j];
                    m2[c * width + j] += d * d;
                }
            }
            let mut out = Vec::with_capacity(width);
            let mut degenerate = false;
            for j in 0..width {
                let grand = used.iter().map(|&c| mean[c * width + j]).sum::<f64>() / n_used;
                let between = used
                    .iter()
                    .map(|&c| (mean[c * width + j] - grand).powi(2))
                    .sum::<f64>()
                    / n_used;
                let within = used
                    .iter()
                    .map(|&c| m2[c * width + j] / counts[c] as f64)
                    .sum::<f64>()
                    / n_used;
                if within > 0.0 {
                    out.push(between / within);
                } else {
                    degenerate = true;
                    out.push(0.0);
                }
            }
            (out, degenerate)
        })
        .collect();

    let degenerate = blocks.iter().any(|b| b.1);
    let values = blocks.into_iter().flat_map(|b| b.0).collect();
    Ok(SnrReport {
        values,
        partition: partition.to_string(),
        class_counts: counts,
        degenerate,
    })
}

/// SNR partitioned by one of the standard intermediate values.
pub fn snr_by(
    ts: &TraceSet,
    partition: Partition,
    target_byte: usize,
) -> Result<SnrReport, AnalysisError> {
    let classes = partition.classes(ts, target_byte)?;
    snr(ts, &classes, partition.name())
}

/// Mean over traces of `|d loss / d x_t|` for the cross-entropy at each
/// trace's stored label, with the model in inference mode.
pub fn saliency<T: Scalar>(
    model: &Model<T>,
    ts: &TraceSet,
    batch: usize,
) -> Result<Vec<f64>, AnalysisError> {
    let w = ts.n_samples();
    if model.input_width() != w {
        return Err(AnalysisError::ShapeMismatch(format!(
            "model expects {} samples, traces have {w}",
            model.input_width()
        )));
    }
    if ts.is_empty() {
        return Err(TraceError::EmptyTraceSet.into());
    }
    let labels = ts.labels()?;
    let rows: Vec<usize> = (0..ts.n_traces()).collect();
    let parts: Vec<Vec<f64>> = rows
        .par_chunks(batch.max(1))
        .map(|chunk| {
            let x = Tensor::<T>::from_traces(ts, chunk);
            let y: Vec<u8> = chunk.iter().map(|&r| labels[r]).collect();
            // the gradient of the batch mean is 1/B of each trace's gradient
            let g = model.input_gradient(&x, &y, Mode::Infer)?;
            let scale = chunk.len() as f64;
            let mut acc = vec![0.0; w];
            for r in 0..chunk.len() {
                for (a, v) in acc.iter_mut().zip(g.row(r)) {
                    *a += (v.as_f64() * scale).abs();
                }
            }
            Ok(acc)
        })
        .collect::<Result<_, NnError>>()?;
    let mut total = vec![0.0; w];
    for p in &parts {
        total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
    }
    let n = ts.n_traces() as f64;
    total.iter_mut().for_each(|t| *t /= n);
    Ok(total)
}

fn check_columns(columns: &[(&str, &[f64])]) -> io::Result<usize> {
    let len = columns.first().map_or(0, |c| c.1.len());
    if columns.iter().any(|c| c.1.len() != len) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "columns differ in length",
        ));
    }
    Ok(len)
}

/// CSV with a header row and one row per entry; no index column.
pub fn write_table<W: Write>(mut out: W, columns: &[(&str, &[f64])]) -> io::Result<()> {
    let len = check_columns(columns)?;
    let header: Vec<&str> = columns.iter().map(|c| c.0).collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..len {
        let row: Vec<String> = columns.iter().map(|c| c.1[i].to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}

/// Named series as CSV with a leading `index` column.
pub fn write_csv<W: Write>(mut out: W, series: &[(&str, &[f64])]) -> io::Result<()> {
    let len = check_columns(series)?;
    write!(out, "index")?;
    for (name, _) in series {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for i in 0..len {
        write!(out, "{i}")?;
        for (_, v) in series {
            write!(out, ",{}", v[i])?;
        }
        writeln!(out)?;
    }
    out.flush()
}

pub fn export_csv(series: &[(&str, &[f64])], path: impl AsRef<Path>) -> io::Result<()> {
    write_csv(BufWriter::new(File::create(path)?), series)
}

pub fn export_table(columns: &[(&str, &[f64])], path: impl AsRef<Path>) -> io::Result<()> {
    write_table(BufWriter::new(File::create(path)?), columns)
}
