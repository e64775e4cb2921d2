//! Training loop: data-parallel gradient averaging over worker threads,
//! per-step schedules, EMA loss monitoring, SWA and checkpoints.

mod checkpoint;

use std::thread;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{guessing_entropy, AttackError, GeConfig};
use crate::nn::{
    BatchStats, Gradients, Mode, Model, NnError, Precision, Scalar, StepOutput, Tensor,
};
use crate::optim::{
    lr_find, opt_step, scale_lr, Ema, LrCurve, LrFindConfig, LrProbe, OptState, OptimError,
    OptimizerConfig, OptimizerKind, ScheduleConfig, ScheduleKind, SwaState,
};
use crate::rng::{stream, streams, substream};
use crate::trace::{random_shift, TraceError, TraceSet};

pub use checkpoint::{
    checkpoint_load, checkpoint_save, config_hash, read_manifest, read_manifest_precision,
    Manifest, TensorEntry, CHECKPOINT_FORMAT,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step} (epoch {epoch}): non-finite loss or gradient")]
    Diverged {
        epoch: usize,
        step: usize,
        history: Vec<EpochRecord>,
    },
    #[error("checkpoint does not match: {0}")]
    ManifestMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub max_shift: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwaConfig {
    /// First epoch (1-based) whose weights enter the average.
    pub start_epoch: usize,
}

fn default_ref_batch() -> usize {
    50
}

/// Scales every learning rate by `batch_size / ref_batch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrScaling {
    #[serde(default = "default_ref_batch")]
    pub ref_batch: usize,
}

fn default_workers() -> usize {
    1
}
fn default_schedule() -> ScheduleConfig {
    ScheduleConfig {
        kind: ScheduleKind::Constant,
        total_steps: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub augmentation: Option<AugmentConfig>,
    #[serde(default)]
    pub swa: Option<SwaConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub val_fraction: f64,
    #[serde(default)]
    pub eval_ge_every: Option<usize>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub lr_scaling: Option<LrScaling>,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, optimizer: OptimizerConfig) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            workers: 1,
            optimizer,
            schedule: default_schedule(),
            augmentation: None,
            swa: None,
            seed: 0,
            val_fraction: 0.0,
            eval_ge_every: None,
            precision: Precision::F32,
            lr_scaling: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return bad("epochs, batch_size and workers must be positive".into());
        }
        if !self.batch_size.is_multiple_of(self.workers) {
            return bad(format!(
                "batch_size {} is not divisible by {} workers",
                self.batch_size, self.workers
            ));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return bad(format!(
                "val_fraction {} outside [0, 0.5]",
                self.val_fraction
            ));
        }
        if let Some(s) = self.swa {
            if s.start_epoch == 0 || s.start_epoch > self.epochs {
                return bad(format!(
                    "swa start_epoch {} outside 1..={}",
                    s.start_epoch, self.epochs
                ));
            }
        }
        if self.eval_ge_every == Some(0) {
            return bad("eval_ge_every must be positive".into());
        }
        if let Some(s) = self.lr_scaling {
            if s.ref_batch == 0 {
                return bad("lr_scaling ref_batch must be positive".into());
            }
        }
        self.optimizer
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.schedule
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    /// The schedule with its length filled in for `n_train` training traces.
    pub fn resolved_schedule(&self, n_train: usize) -> Result<ScheduleConfig, TrainError> {
        let steps = self.epochs * self.steps_per_epoch(n_train);
        let mut s = self.schedule;
        match s.total_steps {
            None => s.total_steps = Some(steps),
            Some(t) if t + 1 < steps => {
                return Err(TrainError::InvalidConfig(format!(
                    "schedule covers {t} steps, training runs {steps}"
                )));
            }
            Some(_) => {}
        }
        Ok(s)
    }

    /// Multiplier from linear batch-size scaling.
    pub fn lr_factor(&self) -> f64 {
        self.lr_scaling
            .map_or(1.0, |s| scale_lr(1.0, self.batch_size, s.ref_batch))
    }
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's traces.
    pub train_loss: f64,
    /// Bias-corrected EMA of per-step losses at the end of the epoch.
    pub ema_loss: f64,
    pub val_loss: Option<f64>,
    pub lr_last: f64,
    /// Mean key rank at the largest evaluated trace count.
    pub ge_at_checkpoint: Option<f64>,
    pub ge_traces_to_zero: Option<usize>,
    /// Not serialized so that histories are byte-reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// EMA smoothing factor for the monitored training loss.
pub const LOSS_EMA_BETA: f64 = 0.98;

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: OptimizerKind,
    pub opt: OptState<T>,
    pub swa: Option<SwaState<T>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub ema: Ema,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>, optimizer: OptimizerKind) -> Self {
        let opt = OptState::new(&optimizer, model.params());
        TrainState {
            model,
            optimizer,
            opt,
            swa: None,
            epoch: 0,
            step: 0,
            ema: Ema::new(LOSS_EMA_BETA),
        }
    }
}

/// Hook called after every completed epoch, e.g. to append to a history
/// file or write a checkpoint.
pub trait TrainObserver<T: Scalar> {
    fn on_epoch(&mut self, record: &EpochRecord, state: &TrainState<T>) -> Result<(), TrainError>;
}

/// Periodic guessing-entropy evaluation on an attack set.
#[derive(Debug, Clone, Copy)]
pub struct GeEval<'a> {
    pub attack: &'a TraceSet,
    pub config: GeConfig,
    pub target_byte: usize,
}

pub struct FitOptions<'a, T: Scalar> {
    pub ge_eval: Option<GeEval<'a>>,
    pub observer: Option<&'a mut dyn TrainObserver<T>>,
}

impl<T: Scalar> Default for FitOptions<'_, T> {
    fn default() -> Self {
        FitOptions {
            ge_eval: None,
            observer: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput<T: Scalar> {
    pub state: TrainState<T>,
    pub swa_model: Option<Model<T>>,
    pub history: Vec<EpochRecord>,
}

/// Training and validation trace indices: a seeded shuffle of all traces
/// whose last `floor(val_fraction * n)` entries are held out.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, streams::SPLIT));
    let n_val = (val_fraction * n as f64).floor() as usize;
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Splits a batch into `workers` contiguous shards. Sizes differ by at most
/// one; shards that would be empty are dropped.
pub fn split_shards<T: Scalar>(
    x: &Tensor<T>,
    y: &[u8],
    workers: usize,
) -> Vec<(Tensor<T>, Vec<u8>)> {
    let b = y.len();
    let w = x.shape()[1];
    let (base, extra) = (b / workers, b % workers);
    let mut out = Vec::with_capacity(workers);
    let mut start = 0;
    for i in 0..workers {
        let len = base + usize::from(i < extra);
        if len == 0 {
            continue;
        }
        let data = x.data()[start * w..(start + len) * w].to_vec();
        out.push((
            Tensor::from_vec(&[len, w], data).expect("slice of a valid batch"),
            y[start..start + len].to_vec(),
        ));
        start += len;
    }
    out
}

/// Loss, gradients and batchnorm statistics averaged over shards, each
/// weighted by its share of the batch. Shards run on their own threads
/// against the same read-only model; the reduction runs in shard order so
/// the result does not depend on scheduling.
pub fn parallel_grad<T: Scalar>(
    model: &Model<T>,
    shards: &[(Tensor<T>, Vec<u8>)],
) -> Result<StepOutput<T>, NnError> {
    if shards.is_empty() {
        return Err(NnError::ShapeMismatch {
            layer: None,
            msg: "no shards".into(),
        });
    }
    let results: Vec<Result<StepOutput<T>, NnError>> = if shards.len() == 1 {
        vec![model.loss_and_grad(&shards[0].0, &shards[0].1)]
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = shards[1..]
                .iter()
                .map(|(x, y)| s.spawn(move || model.loss_and_grad(x, y)))
                .collect();
            let mut out = vec![model.loss_and_grad(&shards[0].0, &shards[0].1)];
            out.extend(
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked")),
            );
            out
        })
    };
    let total: usize = shards.iter().map(|s| s.1.len()).sum();
    let mut loss = T::zero();
    let mut grads = Gradients::zeros_like(model.params());
    let mut bn: Option<BatchStats<T>> = None;
    for (res, (_, y)) in results.into_iter().zip(shards) {
        let out = res?;
        let w = T::from_f64(y.len() as f64 / total as f64);
        loss += w * out.loss;
        grads.add_scaled(w, &out.grads);
        let acc = bn.get_or_insert_with(|| {
            out.bn_stats
                .iter()
                .map(|(m, v)| (vec![T::zero(); m.len()], vec![T::zero(); v.len()]))
                .collect()
        });
        for ((am, av), (m, v)) in acc.iter_mut().zip(&out.bn_stats) {
            am.iter_mut().zip(m).for_each(|(a, &b)| *a += w * b);
            av.iter_mut().zip(v).for_each(|(a, &b)| *a += w * b);
        }
    }
    Ok(StepOutput {
        loss,
        grads,
        bn_stats: bn.unwrap_or_default(),
    })
}

fn batch_with_augment<T: Scalar>(
    ts: &TraceSet,
    rows: &[usize],
    aug: Option<AugmentConfig>,
    rng: &mut crate::rng::StreamRng,
) -> Result<Tensor<T>, TrainError> {
    let Some(AugmentConfig { max_shift }) = aug.filter(|a| a.max_shift > 0) else {
        return Ok(Tensor::from_traces(ts, rows));
    };
    let w = ts.n_samples();
    let mut data = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        let row: Vec<T> = ts.row_f64(r).into_iter().map(T::from_f64).collect();
        data.extend(random_shift(&row, max_shift, rng)?.0);
    }
    Ok(Tensor::from_vec(&[rows.len(), w], data)?)
}

/// Mean inference-mode loss over `rows`.
pub fn evaluate_loss<T: Scalar>(
    model: &Model<T>,
    ts: &TraceSet,
    rows: &[usize],
    chunk: usize,
) -> Result<f64, TrainError> {
    let labels = ts.labels()?;
    let mut infer = model.clone();
    infer.set_mode(Mode::Infer);
    let parts: Vec<f64> = rows
        .par_chunks(chunk.max(1))
        .map(|c| {
            let y: Vec<u8> = c.iter().map(|&r| labels[r]).collect();
            Ok(infer.loss(&Tensor::from_traces(ts, c), &y)?.as_f64() * c.len() as f64)
        })
        .collect::<Result<_, NnError>>()?;
    Ok(parts.iter().sum::<f64>() / rows.len() as f64)
}

/// Replaces the running batchnorm statistics with the average batch
/// statistics over one pass of `rows` (used after weight averaging, where
/// the running statistics of any single model no longer apply).
pub fn recompute_bn_stats<T: Scalar>(
    model: &mut Model<T>,
    ts: &TraceSet,
    rows: &[usize],
    batch: usize,
) -> Result<(), TrainError> {
    if !model.has_batchnorm() || rows.is_empty() {
        return Ok(());
    }
    let mut acc: Option<BatchStats<f64>> = None;
    for c in rows.chunks(batch.max(1)) {
        let pass = model.forward_pass(&Tensor::from_traces(ts, c), Mode::Train)?;
        let w = c.len() as f64 / rows.len() as f64;
        let acc = acc.get_or_insert_with(|| {
            pass.bn_stats
                .iter()
                .map(|(m, v)| (vec![0.0; m.len()], vec![0.0; v.len()]))
                .collect()
        });
        for ((am, av), (m, v)) in acc.iter_mut().zip(&pass.bn_stats) {
            am.iter_mut().zip(m).for_each(|(a, b)| *a += w * b.as_f64());
            av.iter_mut().zip(v).for_each(|(a, b)| *a += w * b.as_f64());
        }
    }
    for (state, (m, v)) in model.bn_state_mut().iter_mut().zip(acc.unwrap_or_default()) {
        state.running_mean = m.into_iter().map(T::from_f64).collect();
        state.running_var = v.into_iter().map(T::from_f64).collect();
    }
    Ok(())
}

/// Trains a freshly initialized model.
pub fn fit_model<T: Scalar>(
    model: Model<T>,
    ts: &TraceSet,
    cfg: &TrainConfig,
    opts: FitOptions<'_, T>,
) -> Result<FitOutput<T>, TrainError> {
    let state = TrainState::new(model, cfg.optimizer.kind);
    fit(state, ts, cfg, opts)
}

/// Runs the remaining epochs of `cfg` starting from `state` (fresh or
/// restored from a checkpoint). Traces must carry labels and already be
/// standardized if standardization is wanted.
pub fn fit<T: Scalar>(
    mut state: TrainState<T>,
    ts: &TraceSet,
    cfg: &TrainConfig,
    mut opts: FitOptions<'_, T>,
) -> Result<FitOutput<T>, TrainError> {
    cfg.validate()?;
    if state.optimizer != cfg.optimizer.kind {
        return Err(TrainError::InvalidConfig(
            "optimizer differs from the one in the training state".into(),
        ));
    }
    if state.epoch > cfg.epochs {
        return Err(TrainError::InvalidConfig(format!(
            "state is at epoch {}, config has {}",
            state.epoch, cfg.epochs
        )));
    }
    if state.model.input_width() != ts.n_samples() {
        return Err(TrainError::InvalidConfig(format!(
            "model expects {} samples, traces have {}",
            state.model.input_width(),
            ts.n_samples()
        )));
    }
    if let Some(a) = cfg.augmentation {
        if a.max_shift > 0 && a.max_shift >= ts.n_samples() {
            return Err(TraceError::ShiftTooLarge {
                max_shift: a.max_shift,
                n_samples: ts.n_samples(),
            }
            .into());
        }
    }
    let labels = ts.labels()?.to_vec();
    let (train_idx, val_idx) = split_indices(ts.n_traces(), cfg.val_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(TraceError::EmptyTraceSet.into());
    }
    let schedule = cfg.resolved_schedule(train_idx.len())?;
    let lr_factor = cfg.lr_factor();
    let base_lr = cfg.optimizer.base_lr;

    state.model.set_mode(Mode::Train);
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let started = Instant::now();
        let epoch = state.epoch;
        let mut order = train_idx.clone();
        order.shuffle(&mut substream(cfg.seed, streams::SHUFFLE, epoch as u64));
        let mut aug_rng = substream(cfg.seed, streams::AUGMENT, epoch as u64);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let x = batch_with_augment::<T>(ts, rows, cfg.augmentation, &mut aug_rng)?;
            let y: Vec<u8> = rows.iter().map(|&r| labels[r]).collect();
            let out = parallel_grad(&state.model, &split_shards(&x, &y, cfg.workers))?;
            let loss = out.loss.as_f64();
            if !loss.is_finite() || !out.grads.all_finite() {
                return Err(TrainError::Diverged {
                    epoch: epoch + 1,
                    step: state.step,
                    history,
                });
            }
            lr = schedule.value(base_lr, state.step)? * lr_factor;
            opt_step(
                &state.optimizer,
                &mut state.opt,
                state.model.params_mut(),
                &out.grads,
                lr,
            )?;
            state.model.apply_bn_stats(&out.bn_stats);
            state.ema.push(loss);
            loss_sum += loss * rows.len() as f64;
            state.step += 1;
        }
        state.epoch += 1;

        if cfg.swa.is_some_and(|s| state.epoch >= s.start_epoch) {
            state
                .swa
                .get_or_insert_with(SwaState::new)
                .update(state.model.params())?;
        }
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate_loss(
                &state.model,
                ts,
                &val_idx,
                cfg.batch_size.max(256),
            )?)
        };
        let mut record = EpochRecord {
            epoch: state.epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            ema_loss: state.ema.value(),
            val_loss,
            lr_last: lr,
            ge_at_checkpoint: None,
            ge_traces_to_zero: None,
            wall_time_s: 0.0,
        };
        if let (Some(every), Some(ge)) = (cfg.eval_ge_every, opts.ge_eval) {
            if state.epoch.is_multiple_of(every) || state.epoch == cfg.epochs {
                let curve = guessing_entropy(&state.model, ge.attack, ge.target_byte, &ge.config)?;
                record.ge_at_checkpoint = curve.mean_rank.last().copied();
                record.ge_traces_to_zero = curve.traces_to_zero;
            }
        }
        record.wall_time_s = started.elapsed().as_secs_f64();
        if let Some(obs) = opts.observer.as_deref_mut() {
            obs.on_epoch(&record, &state)?;
        }
        history.push(record);
    }

    let swa_model = match &state.swa {
        Some(swa) if swa.n_models > 0 => {
            let mut m = state.model.clone();
            for (p, a) in m.params_mut().iter_mut().zip(&swa.averaged) {
                *p = a.clone();
            }
            recompute_bn_stats(&mut m, ts, &train_idx, cfg.batch_size)?;
            m.set_mode(Mode::Infer);
            Some(m)
        }
        _ => None,
    };
    state.model.set_mode(Mode::Infer);
    Ok(FitOutput {
        state,
        swa_model,
        history,
    })
}

/// Learning-rate sweep probe: each call trains one batch at the given
/// learning rate, cycling through freshly shuffled passes of the data.
pub struct ModelProbe<'a, T: Scalar> {
    pub model: Model<T>,
    kind: OptimizerKind,
    opt: OptState<T>,
    ts: &'a TraceSet,
    labels: &'a [u8],
    rows: Vec<usize>,
    batch_size: usize,
    workers: usize,
    seed: u64,
    pass: u64,
    cursor: usize,
}

impl<'a, T: Scalar> ModelProbe<'a, T> {
    pub fn new(model: Model<T>, ts: &'a TraceSet, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let labels = ts.labels()?;
        let (rows, _) = split_indices(ts.n_traces(), cfg.val_fraction, cfg.seed);
        if rows.is_empty() {
            return Err(TraceError::EmptyTraceSet.into());
        }
        let kind = cfg.optimizer.kind;
        let opt = OptState::new(&kind, model.params());
        let mut probe = ModelProbe {
            model,
            kind,
            opt,
            ts,
            labels,
            rows,
            batch_size: cfg.batch_size,
            workers: cfg.workers,
            seed: cfg.seed,
            pass: 0,
            cursor: 0,
        };
        probe.reshuffle();
        Ok(probe)
    }

    fn reshuffle(&mut self) {
        self.rows
            .shuffle(&mut substream(self.seed, "lr-find", self.pass));
        self.pass += 1;
        self.cursor = 0;
    }
}

impl<T: Scalar> LrProbe for ModelProbe<'_, T> {
    fn step(&mut self, lr: f64) -> f64 {
        if self.cursor >= self.rows.len() {
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.rows.len());
        let rows = &self.rows[self.cursor..end];
        self.cursor = end;
        let x = Tensor::<T>::from_traces(self.ts, rows);
        let y: Vec<u8> = rows.iter().map(|&r| self.labels[r]).collect();
        let Ok(out) = parallel_grad(&self.model, &split_shards(&x, &y, self.workers)) else {
            return f64::NAN;
        };
        let loss = out.loss.as_f64();
        if !loss.is_finite()
            || opt_step(
                &self.kind,
                &mut self.opt,
                self.model.params_mut(),
                &out.grads,
                lr,
            )
            .is_err()
        {
            return f64::NAN;
        }
        self.model.apply_bn_stats(&out.bn_stats);
        loss
    }
}

/// Learning-rate sweep on a copy of `model` with the optimizer, batch size
/// and workers of `cfg`.
pub fn lr_find_model<T: Scalar>(
    model: Model<T>,
    ts: &TraceSet,
    cfg: &TrainConfig,
    sweep: &LrFindConfig,
) -> Result<LrCurve, TrainError> {
    let mut probe = ModelProbe::new(model, ts, cfg)?;
    Ok(lr_find(&mut probe, sweep)?)
}
