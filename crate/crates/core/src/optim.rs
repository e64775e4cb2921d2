//! Optimizers, learning-rate schedules, the learning-rate finder and
//! stochastic weight averaging.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Gradients, Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(usize),
    #[error("step {t} outside schedule range 0..={total}")]
    OutOfRange { t: usize, total: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("loss was non-finite at step {0} of the learning-rate sweep")]
    DivergedImmediately(usize),
}

fn default_decay() -> f64 {
    0.9
}
fn default_rms_eps() -> f64 {
    1e-7
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Rmsprop {
        #[serde(default = "default_decay")]
        decay: f64,
        #[serde(default = "default_rms_eps")]
        eps: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    /// Plain gradient descent.
    Sgd,
}

impl OptimizerKind {
    pub fn rmsprop() -> Self {
        OptimizerKind::Rmsprop {
            decay: default_decay(),
            eps: default_rms_eps(),
        }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    fn slots(&self) -> usize {
        match self {
            OptimizerKind::Rmsprop { .. } => 1,
            OptimizerKind::Adam { .. } => 2,
            OptimizerKind::Sgd => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Rmsprop { .. } => "rmsprop",
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub base_lr: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.into()));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be finite and non-negative");
        }
        let unit = |x: f64| x > 0.0 && x < 1.0;
        match self.kind {
            OptimizerKind::Rmsprop { decay, eps } if !unit(decay) || eps <= 0.0 => {
                bad("rmsprop needs 0 < decay < 1, eps > 0")
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !unit(beta1) || !unit(beta2) || eps <= 0.0 =>
            {
                bad("adam needs 0 < beta1, beta2 < 1, eps > 0")
            }
            _ => Ok(()),
        }
    }
}

/// Optimizer moments: per parameter, `[v]` for RMSProp and `[m, v]` for
/// Adam; `t` counts applied steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub t: u64,
    pub slots: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(kind: &OptimizerKind, params: &[Tensor<T>]) -> Self {
        let slots = params
            .iter()
            .map(|p| {
                (0..kind.slots())
                    .map(|_| Tensor::zeros(p.shape()))
                    .collect()
            })
            .collect();
        OptState { t: 0, slots }
    }

    pub fn cast<U: Scalar>(&self) -> OptState<U> {
        OptState {
            t: self.t,
            slots: self
                .slots
                .iter()
                .map(|s| s.iter().map(Tensor::cast).collect())
                .collect(),
        }
    }
}

/// One update of `params` in place. Nothing is modified when an error is
/// returned.
pub fn opt_step<T: Scalar>(
    kind: &OptimizerKind,
    state: &mut OptState<T>,
    params: &mut [Tensor<T>],
    grads: &Gradients<T>,
    lr: f64,
) -> Result<(), OptimError> {
    if params.len() != grads.tensors.len() || params.len() != state.slots.len() {
        return Err(OptimError::ShapeMismatch(format!(
            "{} params, {} grads, {} state slots",
            params.len(),
            grads.tensors.len(),
            state.slots.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(&grads.tensors).enumerate() {
        if p.shape() != g.shape() || state.slots[i].iter().any(|s| s.shape() != p.shape()) {
            return Err(OptimError::ShapeMismatch(format!(
                "parameter {i}: {:?} vs {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if state.slots[i].len() != kind.slots() {
            return Err(OptimError::ShapeMismatch(format!(
                "state has {} slots for {}",
                state.slots[i].len(),
                kind.name()
            )));
        }
        if !g.all_finite() {
            return Err(OptimError::NonFiniteGradient(i));
        }
    }
    state.t += 1;
    let lr = T::from_f64(lr);
    let one = T::one();
    match *kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(&grads.tensors) {
                for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * gi;
                }
            }
        }
        OptimizerKind::Rmsprop { decay, eps } => {
            let (decay, eps) = (T::from_f64(decay), T::from_f64(eps));
            for ((p, g), slot) in params.iter_mut().zip(&grads.tensors).zip(&mut state.slots) {
                let v = slot[0].data_mut();
                for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vi = decay * *vi + (one - decay) * gi * gi;
                    *w -= lr * gi / (vi.sqrt() + eps);
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = state.t as i32;
            let c1 = T::from_f64(1.0 - beta1.powi(t));
            let c2 = T::from_f64(1.0 - beta2.powi(t));
            let (b1, b2, eps) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps));
            for ((p, g), slot) in params.iter_mut().zip(&grads.tensors).zip(&mut state.slots) {
                let (ms, vs) = slot.split_at_mut(1);
                let (m, v) = (ms[0].data_mut(), vs[0].data_mut());
                for (((w, &gi), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mi = b1 * *mi + (one - b1) * gi;
                    *vi = b2 * *vi + (one - b2) * gi * gi;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

fn default_div() -> f64 {
    25.0
}
fn default_final_div() -> f64 {
    1e4
}
fn default_pct_peak() -> f64 {
    0.3
}
fn default_period_frac() -> f64 {
    0.2
}
fn default_half_life_frac() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// The optimizer's base learning rate throughout.
    Constant,
    /// Linear ramp from `lr_max/div` to `lr_max` over the first `pct_peak`
    /// of training, then linear decay to `lr_max/(div*final_div)`.
    OneCycleLinear {
        lr_max: f64,
        #[serde(default = "default_div")]
        div: f64,
        #[serde(default = "default_final_div")]
        final_div: f64,
        #[serde(default = "default_pct_peak")]
        pct_peak: f64,
    },
    /// Raised cosine of period `period_frac·T` under an exponential
    /// envelope of half-life `half_life_frac·T`.
    ExpCosine {
        lr_max: f64,
        #[serde(default = "default_period_frac")]
        period_frac: f64,
        #[serde(default = "default_half_life_frac")]
        half_life_frac: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    /// Length of the schedule; filled in by the training loop when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<usize>,
}

impl ScheduleConfig {
    pub fn new(kind: ScheduleKind, total_steps: usize) -> Self {
        ScheduleConfig {
            kind,
            total_steps: Some(total_steps),
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.into()));
        let pos = |x: f64| x > 0.0 && x.is_finite();
        match self.kind {
            ScheduleKind::Constant => Ok(()),
            ScheduleKind::OneCycleLinear {
                lr_max,
                div,
                final_div,
                pct_peak,
            } => {
                if !pos(lr_max) || !pos(div) || !pos(final_div) {
                    bad("one-cycle lr_max, div and final_div must be positive")
                } else if !(pct_peak > 0.0 && pct_peak < 1.0) {
                    bad("one-cycle pct_peak must be in (0, 1)")
                } else {
                    Ok(())
                }
            }
            ScheduleKind::ExpCosine {
                lr_max,
                period_frac,
                half_life_frac,
            } => {
                let frac = |x: f64| x > 0.0 && x <= 1.0;
                if !pos(lr_max) {
                    bad("exp-cosine lr_max must be positive")
                } else if !frac(period_frac) || !frac(half_life_frac) {
                    bad("exp-cosine fractions must be in (0, 1]")
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Learning rate at step `t`, `0 <= t <= total_steps`.
    pub fn value(&self, base_lr: f64, t: usize) -> Result<f64, OptimError> {
        let total = self.total_steps.unwrap_or(0);
        if t > total {
            return Err(OptimError::OutOfRange { t, total });
        }
        let tf = t as f64;
        let big_t = total.max(1) as f64;
        Ok(match self.kind {
            ScheduleKind::Constant => base_lr,
            ScheduleKind::OneCycleLinear {
                lr_max,
                div,
                final_div,
                pct_peak,
            } => {
                let start = lr_max / div;
                let end = lr_max / (div * final_div);
                let peak = pct_peak * big_t;
                if tf <= peak {
                    start + (lr_max - start) * tf / peak
                } else {
                    lr_max + (end - lr_max) * (tf - peak) / (big_t - peak)
                }
            }
            ScheduleKind::ExpCosine {
                lr_max,
                period_frac,
                half_life_frac,
            } => {
                let h = half_life_frac * big_t;
                let p = period_frac * big_t;
                let envelope = (-tf / h).exp2();
                let cosine = (1.0 + (2.0 * std::f64::consts::PI * tf / p).cos()) / 2.0;
                lr_max * envelope * cosine
            }
        })
    }
}

/// Free-function form of [`ScheduleConfig::value`].
pub fn schedule_value(s: &ScheduleConfig, base_lr: f64, t: usize) -> Result<f64, OptimError> {
    s.value(base_lr, t)
}

/// Linear learning-rate scaling with batch size.
pub fn scale_lr(base_lr: f64, batch_size: usize, ref_batch: usize) -> f64 {
    base_lr * batch_size as f64 / ref_batch as f64
}

/// Running arithmetic mean of parameter snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct SwaState<T> {
    pub averaged: Vec<Tensor<T>>,
    pub n_models: usize,
}

impl<T: Scalar> Default for SwaState<T> {
    fn default() -> Self {
        SwaState {
            averaged: Vec::new(),
            n_models: 0,
        }
    }
}

impl<T: Scalar> SwaState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// `averaged += (params - averaged) / (n + 1)`.
    pub fn update(&mut self, params: &[Tensor<T>]) -> Result<(), OptimError> {
        if self.n_models == 0 {
            self.averaged = params.to_vec();
            self.n_models = 1;
            return Ok(());
        }
        if params.len() != self.averaged.len()
            || params
                .iter()
                .zip(&self.averaged)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(OptimError::ShapeMismatch(
                "snapshot does not match averaged parameters".into(),
            ));
        }
        let k = T::one() / T::from_f64((self.n_models + 1) as f64);
        for (avg, p) in self.averaged.iter_mut().zip(params) {
            for (a, &x) in avg.data_mut().iter_mut().zip(p.data()) {
                *a += (x - *a) * k;
            }
        }
        self.n_models += 1;
        Ok(())
    }
}

/// Free-function form of [`SwaState::update`].
pub fn swa_update<T: Scalar>(
    state: &mut SwaState<T>,
    params: &[Tensor<T>],
) -> Result<(), OptimError> {
    state.update(params)
}

/// Something a learning-rate sweep can drive: each call reports the loss
/// on the next batch and then takes one optimizer step at `lr`.
pub trait LrProbe {
    fn step(&mut self, lr: f64) -> f64;
}

fn default_ema_beta() -> f64 {
    0.98
}
fn default_diverge_factor() -> f64 {
    4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrFindConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub n_steps: usize,
    #[serde(default = "default_ema_beta")]
    pub ema_beta: f64,
    /// The sweep stops once the smoothed loss exceeds this multiple of the
    /// best smoothed loss.
    #[serde(default = "default_diverge_factor")]
    pub diverge_factor: f64,
}

impl LrFindConfig {
    pub fn new(lr_min: f64, lr_max: f64, n_steps: usize) -> Self {
        LrFindConfig {
            lr_min,
            lr_max,
            n_steps,
            ema_beta: default_ema_beta(),
            diverge_factor: default_diverge_factor(),
        }
    }

    /// `lr_min·(lr_max/lr_min)^(i/(n-1))`
    pub fn lr_at(&self, i: usize) -> f64 {
        if i + 1 == self.n_steps {
            return self.lr_max;
        }
        self.lr_min * (self.lr_max / self.lr_min).powf(i as f64 / (self.n_steps - 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrCurve {
    pub lrs: Vec<f64>,
    pub raw_losses: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub suggestion: Option<f64>,
    pub truncated_at: Option<usize>,
}

/// Bias-corrected exponential moving average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    beta: f64,
    avg: f64,
    n: i32,
}

impl Ema {
    pub fn new(beta: f64) -> Self {
        Ema {
            beta,
            avg: 0.0,
            n: 0,
        }
    }

    pub fn push(&mut self, x: f64) -> f64 {
        self.n += 1;
        self.avg = self.beta * self.avg + (1.0 - self.beta) * x;
        self.value()
    }

    pub fn count(&self) -> usize {
        self.n as usize
    }

    pub fn value(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        self.avg / (1.0 - self.beta.powi(self.n))
    }
}

/// Exponential learning-rate sweep. One probe step per grid point; stops
/// early when the loss goes non-finite or the smoothed loss exceeds
/// `diverge_factor` times its best value. The suggestion is the learning
/// rate where the smoothed loss falls fastest against `ln lr`.
pub fn lr_find<P: LrProbe + ?Sized>(
    probe: &mut P,
    cfg: &LrFindConfig,
) -> Result<LrCurve, OptimError> {
    if !(cfg.lr_min > 0.0 && cfg.lr_min < cfg.lr_max && cfg.lr_max.is_finite()) {
        return Err(OptimError::InvalidConfig("need 0 < lr_min < lr_max".into()));
    }
    if cfg.n_steps < 10 {
        return Err(OptimError::InvalidConfig(
            "need at least 10 sweep steps".into(),
        ));
    }
    if !(cfg.ema_beta >= 0.0 && cfg.ema_beta < 1.0) || cfg.diverge_factor <= 1.0 {
        return Err(OptimError::InvalidConfig(
            "need 0 <= ema_beta < 1 and diverge_factor > 1".into(),
        ));
    }
    let mut curve = LrCurve {
        lrs: vec![],
        raw_losses: vec![],
        smoothed: vec![],
        suggestion: None,
        truncated_at: None,
    };
    let mut ema = Ema::new(cfg.ema_beta);
    let mut best = f64::INFINITY;
    for i in 0..cfg.n_steps {
        let lr = cfg.lr_at(i);
        let loss = probe.step(lr);
        if !loss.is_finite() {
            if i < 5 {
                return Err(OptimError::DivergedImmediately(i));
            }
            curve.truncated_at = Some(i);
            break;
        }
        let s = ema.push(loss);
        if s > cfg.diverge_factor * best {
            curve.truncated_at = Some(i);
            break;
        }
        best = best.min(s);
        curve.lrs.push(lr);
        curve.raw_losses.push(loss);
        curve.smoothed.push(s);
    }
    curve.suggestion = steepest_descent_lr(&curve.lrs, &curve.smoothed);
    Ok(curve)
}

fn steepest_descent_lr(lrs: &[f64], losses: &[f64]) -> Option<f64> {
    let n = lrs.len();
    if n < 2 {
        return None;
    }
    let x: Vec<f64> = lrs.iter().map(|l| l.ln()).collect();
    let slope = |i: usize| {
        let (a, b) = match i {
            0 => (0, 1),
            i if i == n - 1 => (n - 2, n - 1),
            i => (i - 1, i + 1),
        };
        (losses[b] - losses[a]) / (x[b] - x[a])
    };
    (0..n)
        .min_by(|&a, &b| slope(a).total_cmp(&slope(b)))
        .map(|i| lrs[i])
}
