//! Key-recovery evaluation: per-trace hypothesis scores, log-likelihood
//! accumulation, key rank and guessing entropy.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Model, NnError, Scalar, Tensor};
use crate::rng::{streams, substream};
use crate::trace::{aes_sbox, TraceError, TraceSet};

/// Probabilities are clamped to this floor before taking logs so a single
/// confidently wrong prediction cannot drive a hypothesis to `-inf`.
pub const PROB_FLOOR: f64 = 1e-40;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(
        "attack set mixes keys: trace {trace} has key byte {found:#04x}, expected {expected:#04x}"
    )]
    MixedKeys {
        trace: usize,
        expected: u8,
        found: u8,
    },
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// `score[k] = ln p[SBox(plaintext ^ k)]`.
pub fn hypothesis_scores(probs: &[f64], plaintext_byte: u8) -> [f64; 256] {
    assert_eq!(probs.len(), 256, "expected 256 class probabilities");
    let mut out = [0.0; 256];
    for (k, s) in out.iter_mut().enumerate() {
        let class = aes_sbox(plaintext_byte ^ k as u8) as usize;
        *s = probs[class].max(PROB_FLOOR).ln();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreAccumulator {
    pub cum_loglik: [f64; 256],
    pub n_traces_seen: usize,
    pub target_byte: usize,
}

impl ScoreAccumulator {
    pub fn new(target_byte: usize) -> Self {
        ScoreAccumulator {
            cum_loglik: [0.0; 256],
            n_traces_seen: 0,
            target_byte,
        }
    }

    pub fn accumulate(&mut self, scores: &[f64; 256]) {
        for (c, s) in self.cum_loglik.iter_mut().zip(scores) {
            *c += s;
        }
        self.n_traces_seen += 1;
    }

    pub fn rank(&self, true_key_byte: u8) -> u8 {
        key_rank(&self.cum_loglik, true_key_byte)
    }
}

/// Position of the true key among all 256 hypotheses, 0 being best. Ties
/// are broken pessimistically: an equal-scored hypothesis with a smaller
/// key value counts as ahead.
pub fn key_rank(scores: &[f64; 256], true_key_byte: u8) -> u8 {
    let t = true_key_byte as usize;
    let target = scores[t];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(k, &s)| k != t && (s > target || (s == target && k < t)))
        .count();
    ahead as u8
}

fn default_repetitions() -> usize {
    100
}
fn default_step() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeConfig {
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub max_traces: usize,
    #[serde(default = "default_step")]
    pub step: usize,
    #[serde(default)]
    pub seed: u64,
}

impl GeConfig {
    pub fn new(repetitions: usize, max_traces: usize, step: usize, seed: u64) -> Self {
        GeConfig {
            repetitions,
            max_traces,
            step,
            seed,
        }
    }

    /// 1, then every multiple of `step`, then `max_traces`.
    pub fn axis(&self) -> Vec<usize> {
        let mut axis = vec![1];
        axis.extend(
            (1..=self.max_traces / self.step)
                .map(|i| i * self.step)
                .filter(|&n| n > 1),
        );
        if *axis.last().unwrap() != self.max_traces {
            axis.push(self.max_traces);
        }
        axis
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeCurve {
    pub n_traces: Vec<usize>,
    pub mean_rank: Vec<f64>,
    pub repetitions: usize,
    pub seed: u64,
    /// First axis point whose mean rank is below 0.5.
    pub traces_to_zero: Option<usize>,
}

impl GeCurve {
    pub fn at(&self, n: usize) -> Option<f64> {
        self.n_traces
            .iter()
            .position(|&x| x == n)
            .map(|i| self.mean_rank[i])
    }
}

/// Guessing entropy from precomputed class probabilities, one 256-vector
/// per attack trace. Each repetition draws its own seeded permutation of
/// the attack traces and scores the first `max_traces` of it.
pub fn guessing_entropy_from_probs(
    probs: &[Vec<f64>],
    plaintext_bytes: &[u8],
    true_key_byte: u8,
    target_byte: usize,
    cfg: &GeConfig,
) -> Result<GeCurve, AttackError> {
    let n = probs.len();
    if plaintext_bytes.len() != n {
        return Err(AttackError::ShapeMismatch(format!(
            "{n} predictions for {} plaintexts",
            plaintext_bytes.len()
        )));
    }
    if let Some(i) = probs.iter().position(|p| p.len() != 256) {
        return Err(AttackError::ShapeMismatch(format!(
            "prediction {i} has {} classes",
            probs[i].len()
        )));
    }
    if cfg.repetitions == 0 || cfg.step == 0 || cfg.max_traces == 0 {
        return Err(AttackError::InvalidConfig(
            "repetitions, step and max_traces must be positive".into(),
        ));
    }
    if cfg.max_traces > n {
        return Err(AttackError::InvalidConfig(format!(
            "max_traces {} exceeds the {n} attack traces",
            cfg.max_traces
        )));
    }
    let scores: Vec<[f64; 256]> = probs
        .iter()
        .zip(plaintext_bytes)
        .map(|(p, &pt)| hypothesis_scores(p, pt))
        .collect();
    let axis = cfg.axis();

    let per_rep: Vec<Vec<u8>> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(cfg.seed, streams::ATTACK, r as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut acc = ScoreAccumulator::new(target_byte);
            let mut ranks = Vec::with_capacity(axis.len());
            let mut next = 0;
            for (seen, &i) in order.iter().take(cfg.max_traces).enumerate() {
                acc.accumulate(&scores[i]);
                if seen + 1 == axis[next] {
                    ranks.push(acc.rank(true_key_byte));
                    next += 1;
                }
            }
            ranks
        })
        .collect();

    let mut mean_rank = vec![0.0; axis.len()];
    for ranks in &per_rep {
        for (m, &r) in mean_rank.iter_mut().zip(ranks) {
            *m += r as f64;
        }
    }
    mean_rank
        .iter_mut()
        .for_each(|m| *m /= cfg.repetitions as f64);
    let traces_to_zero = axis
        .iter()
        .zip(&mean_rank)
        .find(|(_, &m)| m < 0.5)
        .map(|(&n, _)| n);
    Ok(GeCurve {
        n_traces: axis,
        mean_rank,
        repetitions: cfg.repetitions,
        seed: cfg.seed,
        traces_to_zero,
    })
}

/// The single key byte shared by every trace of an attack set.
pub fn fixed_key_byte(ts: &TraceSet, target_byte: usize) -> Result<u8, AttackError> {
    if target_byte >= 16 {
        return Err(TraceError::TargetByte(target_byte).into());
    }
    let keys = ts.keys()?;
    let expected = keys.first().ok_or(TraceError::EmptyTraceSet)?[target_byte];
    if let Some(trace) = keys.iter().position(|k| k[target_byte] != expected) {
        return Err(AttackError::MixedKeys {
            trace,
            expected,
            found: keys[trace][target_byte],
        });
    }
    Ok(expected)
}

/// Guessing entropy of `model` on an attack set with a fixed key.
pub fn guessing_entropy<T: Scalar>(
    model: &Model<T>,
    ts: &TraceSet,
    target_byte: usize,
    cfg: &GeConfig,
) -> Result<GeCurve, AttackError> {
    let key = fixed_key_byte(ts, target_byte)?;
    if model.input_width() != ts.n_samples() {
        return Err(AttackError::ShapeMismatch(format!(
            "model expects {} samples, traces have {}",
            model.input_width(),
            ts.n_samples()
        )));
    }
    let plaintexts: Vec<u8> = ts.plaintexts()?.iter().map(|p| p[target_byte]).collect();
    let rows: Vec<usize> = (0..ts.n_traces()).collect();
    let probs = predict_parallel(model, ts, &rows)?;
    guessing_entropy_from_probs(&probs, &plaintexts, key, target_byte, cfg)
}

/// Infer-mode class probabilities for `rows`, computed in parallel chunks.
pub fn predict_parallel<T: Scalar>(
    model: &Model<T>,
    ts: &TraceSet,
    rows: &[usize],
) -> Result<Vec<Vec<f64>>, NnError> {
    const CHUNK: usize = 256;
    let parts: Vec<Vec<Vec<f64>>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| model.predict_proba(&Tensor::from_traces(ts, chunk), CHUNK))
        .collect::<Result<_, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}
