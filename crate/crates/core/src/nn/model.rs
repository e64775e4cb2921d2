use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ActShape, LayerPlan, LayerSpec, ModelConfig, N_CLASSES};
use super::kernels::{self, ConvGeom};
use super::{loss_ce, NnError, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batchnorm uses batch statistics.
    #[default]
    Train,
    /// Batchnorm uses running statistics.
    Infer,
}

/// Running statistics of one batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Batch mean and variance observed by each batchnorm layer during a
/// train-mode forward pass, in layer order.
pub type BatchStats<T> = Vec<(Vec<T>, Vec<T>)>;

/// One gradient tensor per parameter, aligned with [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        Gradients {
            tensors: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: T, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            kernels::axpy(a.data_mut(), alpha, b.data());
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// `max |a - b| / max(|b|, floor)` over all entries.
    pub fn max_rel_diff(&self, reference: &Gradients<T>, floor: f64) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.tensors.iter().zip(&reference.tensors) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                let (x, y) = (x.as_f64(), y.as_f64());
                worst = worst.max((x - y).abs() / y.abs().max(floor));
            }
        }
        worst
    }
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Bn {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool {
        argmax: Vec<usize>,
    },
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub batch: usize,
    pub logits: Tensor<T>,
    pub bn_stats: BatchStats<T>,
    inputs: Vec<Vec<T>>,
    caches: Vec<Cache<T>>,
}

/// Loss, gradients and batchnorm statistics of one batch.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: T,
    pub grads: Gradients<T>,
    pub bn_stats: BatchStats<T>,
}

#[derive(Debug, Clone, Copy)]
struct Slots {
    /// Index of the first parameter owned by the layer.
    param: Option<usize>,
    bn: Option<usize>,
}

/// A sequential classifier over traces of `input_width` samples.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    plan: Vec<LayerPlan>,
    slots: Vec<Slots>,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    bn_state: Vec<BnState<T>>,
    pub mode: Mode,
}

fn layer_kind(spec: &LayerSpec) -> &'static str {
    match spec {
        LayerSpec::Dense { .. } => "dense",
        LayerSpec::Conv1d { .. } => "conv1d",
        LayerSpec::BatchNorm { .. } => "batchnorm",
        LayerSpec::Relu => "relu",
        LayerSpec::AvgPool { .. } => "avgpool",
        LayerSpec::MaxPool { .. } => "maxpool",
        LayerSpec::Flatten => "flatten",
        LayerSpec::SoftmaxCeHead { .. } => "head",
    }
}

/// Builds and initializes a model: He-uniform for dense and convolution
/// weights, Glorot-uniform for the head, zero biases, unit batchnorm scale.
/// Deterministic in `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>, NnError> {
    let plan = config.plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut params = Vec::new();
    let mut bn_names = Vec::new();
    let mut bn_state = Vec::new();
    let mut slots = Vec::with_capacity(plan.len());
    let uniform = |shape: &[usize], limit: f64, rng: &mut ChaCha8Rng| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.random_range(-limit..limit)))
            .collect();
        Tensor::from_vec(shape, data).expect("shape matches")
    };
    for (i, p) in plan.iter().enumerate() {
        let prefix = format!("{i:03}.{}", layer_kind(&p.spec));
        let mut slot = Slots {
            param: None,
            bn: None,
        };
        match p.spec {
            LayerSpec::Dense { units } | LayerSpec::SoftmaxCeHead { classes: units } => {
                let fan_in = p.input.size();
                let limit = if matches!(p.spec, LayerSpec::Dense { .. }) {
                    (6.0 / fan_in as f64).sqrt()
                } else {
                    (6.0 / (fan_in + units) as f64).sqrt()
                };
                slot.param = Some(params.len());
                params.push(uniform(&[units, fan_in], limit, &mut rng));
                params.push(Tensor::zeros(&[units]));
                names.push(format!("{prefix}.weight"));
                names.push(format!("{prefix}.bias"));
            }
            LayerSpec::Conv1d {
                filters, kernel, ..
            } => {
                let c_in = p.input.cl().0;
                let limit = (6.0 / (c_in * kernel) as f64).sqrt();
                slot.param = Some(params.len());
                params.push(uniform(&[filters, c_in, kernel], limit, &mut rng));
                params.push(Tensor::zeros(&[filters]));
                names.push(format!("{prefix}.weight"));
                names.push(format!("{prefix}.bias"));
            }
            LayerSpec::BatchNorm { .. } => {
                let ch = p.input.cl().0;
                slot.param = Some(params.len());
                params.push(Tensor::full(&[ch], T::one()));
                params.push(Tensor::zeros(&[ch]));
                names.push(format!("{prefix}.gamma"));
                names.push(format!("{prefix}.beta"));
                slot.bn = Some(bn_state.len());
                bn_state.push(BnState {
                    running_mean: vec![T::zero(); ch],
                    running_var: vec![T::one(); ch],
                });
                bn_names.push(prefix);
            }
            _ => {}
        }
        slots.push(slot);
    }
    Ok(Model {
        config: config.clone(),
        plan,
        slots,
        names,
        params,
        bn_names,
        bn_state,
        mode: Mode::Train,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_width(&self) -> usize {
        self.config.input_width
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn bn_state(&self) -> &[BnState<T>] {
        &self.bn_state
    }

    pub fn bn_state_mut(&mut self) -> &mut [BnState<T>] {
        &mut self.bn_state
    }

    pub fn has_batchnorm(&self) -> bool {
        !self.bn_state.is_empty()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |v: &[T]| {
            v.iter()
                .map(|x| U::from_f64(x.as_f64()))
                .collect::<Vec<U>>()
        };
        Model {
            config: self.config.clone(),
            plan: self.plan.clone(),
            slots: self.slots.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            bn_names: self.bn_names.clone(),
            bn_state: self
                .bn_state
                .iter()
                .map(|s| BnState {
                    running_mean: conv(&s.running_mean),
                    running_var: conv(&s.running_var),
                })
                .collect(),
            mode: self.mode,
        }
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<usize, NnError> {
        match batch.shape() {
            [b, s] if *s == self.input_width() => Ok(*b),
            other => Err(NnError::ShapeMismatch {
                layer: None,
                msg: format!(
                    "expected batch x {} input, got {other:?}",
                    self.input_width()
                ),
            }),
        }
    }

    /// Forward pass without side effects. In [`Mode::Train`] the batchnorm
    /// statistics of this batch are returned in the pass for the caller to
    /// fold into the running statistics.
    pub fn forward_pass(&self, batch: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>, NnError> {
        let bsz = self.check_input(batch)?;
        let mut x = batch.data().to_vec();
        let mut inputs = Vec::with_capacity(self.plan.len());
        let mut caches = Vec::with_capacity(self.plan.len());
        let mut bn_stats = Vec::new();
        for (p, slot) in self.plan.iter().zip(&self.slots) {
            let (y, cache) = match p.spec {
                LayerSpec::Dense { .. } | LayerSpec::SoftmaxCeHead { .. } => {
                    let pi = slot.param.expect("dense owns params");
                    let y = kernels::dense_forward(
                        &x,
                        bsz,
                        p.input.size(),
                        self.params[pi].data(),
                        self.params[pi + 1].data(),
                    );
                    (y, Cache::None)
                }
                LayerSpec::Conv1d {
                    filters,
                    kernel,
                    stride,
                    ..
                } => {
                    let pi = slot.param.expect("conv owns params");
                    let geo = conv_geom(p, bsz, filters, kernel, stride);
                    let y = kernels::conv_forward(
                        &x,
                        &geo,
                        self.params[pi].data(),
                        self.params[pi + 1].data(),
                    );
                    (y, Cache::None)
                }
                LayerSpec::BatchNorm { eps, .. } => {
                    let pi = slot.param.expect("bn owns params");
                    let (ch, len) = p.input.cl();
                    let eps = T::from_f64(eps);
                    let (mean, var, batch_stats) = match mode {
                        Mode::Train => {
                            let (m, v) = kernels::channel_moments(&x, bsz, ch, len);
                            bn_stats.push((m.clone(), v.clone()));
                            (m, v, true)
                        }
                        Mode::Infer => {
                            let st = &self.bn_state[slot.bn.expect("bn state")];
                            (st.running_mean.clone(), st.running_var.clone(), false)
                        }
                    };
                    let inv_std: Vec<T> =
                        var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                    let (y, xhat) = kernels::bn_apply(
                        &x,
                        bsz,
                        ch,
                        len,
                        &mean,
                        &inv_std,
                        self.params[pi].data(),
                        self.params[pi + 1].data(),
                    );
                    (
                        y,
                        Cache::Bn {
                            xhat,
                            inv_std,
                            batch_stats,
                        },
                    )
                }
                LayerSpec::Relu => (x.iter().map(|&v| v.max(T::zero())).collect(), Cache::None),
                LayerSpec::AvgPool { width } => {
                    let (ch, len) = p.input.cl();
                    (
                        kernels::avgpool_forward(&x, bsz * ch, len, width),
                        Cache::None,
                    )
                }
                LayerSpec::MaxPool { width } => {
                    let (ch, len) = p.input.cl();
                    let (y, argmax) = kernels::maxpool_forward(&x, bsz * ch, len, width);
                    (y, Cache::MaxPool { argmax })
                }
                LayerSpec::Flatten => (x.clone(), Cache::None),
            };
            inputs.push(std::mem::replace(&mut x, y));
            caches.push(cache);
        }
        let logits = Tensor::from_vec(&[bsz, N_CLASSES], x)?;
        Ok(ForwardPass {
            batch: bsz,
            logits,
            bn_stats,
            inputs,
            caches,
        })
    }

    /// Reverse pass from `dlogits`; returns parameter gradients and the
    /// gradient with respect to the input batch.
    pub fn backward_pass(
        &self,
        pass: &ForwardPass<T>,
        dlogits: &Tensor<T>,
    ) -> Result<(Gradients<T>, Tensor<T>), NnError> {
        let bsz = pass.batch;
        if dlogits.shape() != [bsz, N_CLASSES] {
            return Err(NnError::ShapeMismatch {
                layer: None,
                msg: format!("dlogits shape {:?}", dlogits.shape()),
            });
        }
        let mut grads = Gradients::zeros_like(&self.params);
        let mut g = dlogits.data().to_vec();
        for (i, p) in self.plan.iter().enumerate().rev() {
            let x = &pass.inputs[i];
            let slot = self.slots[i];
            g = match p.spec {
                LayerSpec::Dense { .. } | LayerSpec::SoftmaxCeHead { .. } => {
                    let pi = slot.param.expect("dense owns params");
                    let (gw, gb) = split_two(&mut grads.tensors, pi);
                    kernels::dense_backward(
                        x,
                        &g,
                        bsz,
                        p.input.size(),
                        self.params[pi].data(),
                        gw,
                        gb,
                    )
                }
                LayerSpec::Conv1d {
                    filters,
                    kernel,
                    stride,
                    ..
                } => {
                    let pi = slot.param.expect("conv owns params");
                    let geo = conv_geom(p, bsz, filters, kernel, stride);
                    let (gw, gb) = split_two(&mut grads.tensors, pi);
                    kernels::conv_backward(x, &g, &geo, self.params[pi].data(), gw, gb)
                }
                LayerSpec::BatchNorm { .. } => {
                    let pi = slot.param.expect("bn owns params");
                    let (ch, len) = p.input.cl();
                    let Cache::Bn {
                        xhat,
                        inv_std,
                        batch_stats,
                    } = &pass.caches[i]
                    else {
                        unreachable!("batchnorm cache")
                    };
                    let (gg, gb) = split_two(&mut grads.tensors, pi);
                    let gamma = self.params[pi].data();
                    if *batch_stats {
                        kernels::bn_backward_train(&g, xhat, bsz, ch, len, inv_std, gamma, gg, gb)
                    } else {
                        kernels::bn_backward_fixed(&g, xhat, bsz, ch, len, inv_std, gamma, gg, gb)
                    }
                }
                LayerSpec::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect(),
                LayerSpec::AvgPool { width } => {
                    let (ch, len) = p.input.cl();
                    kernels::avgpool_backward(&g, bsz * ch, len, width)
                }
                LayerSpec::MaxPool { .. } => {
                    let Cache::MaxPool { argmax } = &pass.caches[i] else {
                        unreachable!("maxpool cache")
                    };
                    let mut dx = vec![T::zero(); x.len()];
                    for (&a, &gi) in argmax.iter().zip(&g) {
                        dx[a] += gi;
                    }
                    dx
                }
                LayerSpec::Flatten => g,
            };
        }
        let dx = Tensor::from_vec(&[bsz, self.input_width()], g)?;
        Ok((grads, dx))
    }

    /// Logits for `batch`. In train mode the running batchnorm statistics
    /// are updated.
    pub fn forward(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let pass = self.forward_pass(batch, self.mode)?;
        if self.mode == Mode::Train {
            self.apply_bn_stats(&pass.bn_stats);
        }
        Ok(pass.logits)
    }

    /// Mean cross-entropy and its parameter gradients; does not touch the
    /// running statistics.
    pub fn loss_and_grad(
        &self,
        batch: &Tensor<T>,
        labels: &[u8],
    ) -> Result<StepOutput<T>, NnError> {
        let pass = self.forward_pass(batch, self.mode)?;
        check_labels(pass.batch, labels)?;
        let (loss, dlogits) = loss_ce(&pass.logits, labels);
        let (grads, _) = self.backward_pass(&pass, &dlogits)?;
        Ok(StepOutput {
            loss,
            grads,
            bn_stats: pass.bn_stats,
        })
    }

    pub fn backward(&self, batch: &Tensor<T>, labels: &[u8]) -> Result<Gradients<T>, NnError> {
        Ok(self.loss_and_grad(batch, labels)?.grads)
    }

    /// Mean cross-entropy of `batch` in the model's mode.
    pub fn loss(&self, batch: &Tensor<T>, labels: &[u8]) -> Result<T, NnError> {
        let pass = self.forward_pass(batch, self.mode)?;
        check_labels(pass.batch, labels)?;
        Ok(loss_ce(&pass.logits, labels).0)
    }

    /// Gradient of the mean batch loss with respect to each input sample.
    pub fn input_gradient(
        &self,
        batch: &Tensor<T>,
        labels: &[u8],
        mode: Mode,
    ) -> Result<Tensor<T>, NnError> {
        let pass = self.forward_pass(batch, mode)?;
        check_labels(pass.batch, labels)?;
        let (_, dlogits) = loss_ce(&pass.logits, labels);
        Ok(self.backward_pass(&pass, &dlogits)?.1)
    }

    /// `running = momentum * running + (1 - momentum) * batch`, per layer.
    pub fn apply_bn_stats(&mut self, stats: &BatchStats<T>) {
        let momenta: Vec<T> = self
            .plan
            .iter()
            .filter_map(|p| match p.spec {
                LayerSpec::BatchNorm { momentum, .. } => Some(T::from_f64(momentum)),
                _ => None,
            })
            .collect();
        for ((state, (mean, var)), &m) in self.bn_state.iter_mut().zip(stats).zip(&momenta) {
            for (r, &b) in state.running_mean.iter_mut().zip(mean) {
                *r = m * *r + (T::one() - m) * b;
            }
            for (r, &b) in state.running_var.iter_mut().zip(var) {
                *r = (m * *r + (T::one() - m) * b).max(T::zero());
            }
        }
    }

    /// Class probabilities (softmax of infer-mode logits) in `f64`, one
    /// 256-vector per input row, evaluated in chunks of `chunk` rows.
    pub fn predict_proba(
        &self,
        inputs: &Tensor<T>,
        chunk: usize,
    ) -> Result<Vec<Vec<f64>>, NnError> {
        let n = self.check_input(inputs)?;
        let w = self.input_width();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let part = Tensor::from_vec(
                &[end - start, w],
                inputs.data()[start * w..end * w].to_vec(),
            )?;
            let logits = self.forward_pass(&part, Mode::Infer)?.logits;
            for r in 0..end - start {
                out.push(softmax_f64(logits.row(r)));
            }
        }
        Ok(out)
    }
}

fn softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_labels(batch: usize, labels: &[u8]) -> Result<(), NnError> {
    if labels.len() != batch {
        return Err(NnError::ShapeMismatch {
            layer: None,
            msg: format!("{} labels for batch of {batch}", labels.len()),
        });
    }
    Ok(())
}

fn conv_geom(
    p: &LayerPlan,
    batch: usize,
    filters: usize,
    kernel: usize,
    stride: usize,
) -> ConvGeom {
    let (c_in, l_in) = p.input.cl();
    let ActShape::Seq { len: l_out, .. } = p.output else {
        unreachable!("conv output is a sequence")
    };
    ConvGeom {
        batch,
        c_in,
        l_in,
        filters,
        kernel,
        stride,
        pad_left: p.pad_left,
        l_out,
    }
}

fn split_two<T: Scalar>(v: &mut [Tensor<T>], i: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = v[i..].split_at_mut(1);
    (a[0].data_mut(), b[0].data_mut())
}
