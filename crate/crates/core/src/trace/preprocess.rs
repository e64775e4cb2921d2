use serde::{Deserialize, Serialize};

use super::{Result, Samples, TraceError, TraceSet};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreprocessMode {
    /// Per-sample mean and standard deviation, computed over traces.
    Pointwise,
    /// One scalar mean and standard deviation over every value.
    Global,
}

/// Standardization statistics. Fitted on a profiling set and reused on the
/// matching attack set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub mode: PreprocessMode,
    /// One entry per sample (pointwise) or a single entry (global).
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
}

impl PreprocessStats {
    /// Population statistics of `ts`.
    pub fn fit(ts: &TraceSet, mode: PreprocessMode, epsilon: f64) -> Result<PreprocessStats> {
        if ts.is_empty() || ts.n_samples() == 0 {
            return Err(TraceError::EmptyTraceSet);
        }
        let n = ts.n_traces();
        let s = ts.n_samples();
        let (mean, std) = match mode {
            PreprocessMode::Pointwise => {
                let mut mean = vec![0.0; s];
                for i in 0..n {
                    for (t, m) in mean.iter_mut().enumerate() {
                        *m += ts.value(i, t);
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; s];
                for i in 0..n {
                    for (t, v) in var.iter_mut().enumerate() {
                        let d = ts.value(i, t) - mean[t];
                        *v += d * d;
                    }
                }
                let std = var.into_iter().map(|v| (v / n as f64).sqrt()).collect();
                (mean, std)
            }
            PreprocessMode::Global => {
                let total = (n * s) as f64;
                let samples = ts.samples();
                let m = (0..n * s).map(|k| samples.get_f64(k)).sum::<f64>() / total;
                let v = (0..n * s)
                    .map(|k| (samples.get_f64(k) - m).powi(2))
                    .sum::<f64>()
                    / total;
                (vec![m], vec![v.sqrt()])
            }
        };
        Ok(PreprocessStats {
            mode,
            mean,
            std,
            epsilon,
        })
    }

    /// `(x - mean) / (std + epsilon)`, as an `f32` trace set carrying these stats.
    pub fn apply(&self, ts: &TraceSet) -> Result<TraceSet> {
        if ts.is_empty() {
            return Err(TraceError::EmptyTraceSet);
        }
        let s = ts.n_samples();
        let expected = match self.mode {
            PreprocessMode::Pointwise => s,
            PreprocessMode::Global => 1,
        };
        if self.mean.len() != expected || self.std.len() != expected {
            return Err(TraceError::StatsMismatch(format!(
                "{:?} stats with {} entries for {s} samples",
                self.mode,
                self.mean.len()
            )));
        }
        if self.std.iter().any(|&x| x < 0.0) || self.epsilon < 0.0 {
            return Err(TraceError::StatsMismatch("negative std or epsilon".into()));
        }
        let scale: Vec<f64> = self
            .std
            .iter()
            .map(|sd| 1.0 / (sd + self.epsilon))
            .collect();
        let mut out = Vec::with_capacity(ts.n_traces() * s);
        for i in 0..ts.n_traces() {
            for t in 0..s {
                let c = if expected == 1 { 0 } else { t };
                out.push(((ts.value(i, t) - self.mean[c]) * scale[c]) as f32);
            }
        }
        let mut res = TraceSet::new(ts.n_traces(), s, Samples::F32(out), ts.meta.clone())?;
        res.stats = Some(self.clone());
        Ok(res)
    }
}

/// Standardizes `ts`. When `stats` is given they are applied as-is (their
/// mode must match); otherwise they are fitted on `ts` with
/// [`DEFAULT_EPSILON`].
pub fn standardize(
    ts: &TraceSet,
    mode: PreprocessMode,
    stats: Option<&PreprocessStats>,
) -> Result<(TraceSet, PreprocessStats)> {
    let stats = match stats {
        Some(st) if st.mode != mode => {
            return Err(TraceError::StatsMismatch(format!(
                "requested {mode:?} but stats are {:?}",
                st.mode
            )))
        }
        Some(st) => st.clone(),
        None => PreprocessStats::fit(ts, mode, DEFAULT_EPSILON)?,
    };
    Ok((stats.apply(ts)?, stats))
}
