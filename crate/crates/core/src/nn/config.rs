use serde::{Deserialize, Serialize};

use super::NnError;

pub const N_CLASSES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

fn default_stride() -> usize {
    1
}
fn default_momentum() -> f64 {
    0.99
}
fn default_bn_eps() -> f64 {
    1e-5
}
fn default_classes() -> usize {
    N_CLASSES
}

/// One layer of a sequential model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv1d {
        filters: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        padding: Padding,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default = "default_bn_eps")]
        eps: f64,
    },
    Relu,
    #[serde(rename = "avgpool")]
    AvgPool {
        width: usize,
    },
    #[serde(rename = "maxpool")]
    MaxPool {
        width: usize,
    },
    Flatten,
    /// Final dense projection to class logits; softmax lives in the loss.
    SoftmaxCeHead {
        #[serde(default = "default_classes")]
        classes: usize,
    },
}

/// Activation layout between layers: `channels × len` sequences or flat
/// feature vectors (stored as `features × 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Seq { channels: usize, len: usize },
    Flat { features: usize },
}

impl ActShape {
    pub fn size(self) -> usize {
        match self {
            ActShape::Seq { channels, len } => channels * len,
            ActShape::Flat { features } => features,
        }
    }

    /// `(channels, len)` view; flat vectors are `features × 1`.
    pub fn cl(self) -> (usize, usize) {
        match self {
            ActShape::Seq { channels, len } => (channels, len),
            ActShape::Flat { features } => (features, 1),
        }
    }
}

/// Ordered layer list plus the input width it is checked against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetFile {
    name: String,
    #[serde(default)]
    #[allow(dead_code)]
    description: String,
    layers: Vec<LayerSpec>,
}

const PRESETS: &[(&str, &str)] = &[
    ("mlp_ascad", include_str!("../../presets/mlp_ascad.json")),
    (
        "vgg_cnn_best",
        include_str!("../../presets/vgg_cnn_best.json"),
    ),
    (
        "shallow_cnn",
        include_str!("../../presets/shallow_cnn.json"),
    ),
    (
        "mlp_shallow",
        include_str!("../../presets/mlp_shallow.json"),
    ),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// Per-layer resolved geometry, produced by [`ModelConfig::plan`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub spec: LayerSpec,
    pub input: ActShape,
    pub output: ActShape,
    /// Left zero padding for `same` convolutions.
    pub pad_left: usize,
}

impl ModelConfig {
    pub fn new(input_width: usize, layers: Vec<LayerSpec>) -> Self {
        ModelConfig {
            name: None,
            input_width,
            layers,
        }
    }

    /// One of the shipped presets, bound to `input_width`.
    pub fn preset(name: &str, input_width: usize) -> Result<Self, NnError> {
        let (_, src) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| NnError::UnknownPreset(name.to_string()))?;
        let file: PresetFile =
            serde_json::from_str(src).map_err(|e| NnError::InvalidConfig(e.to_string()))?;
        let cfg = ModelConfig {
            name: Some(file.name),
            input_width,
            layers: file.layers,
        };
        cfg.plan()?;
        Ok(cfg)
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        let cfg: ModelConfig =
            serde_json::from_str(s).map_err(|e| NnError::InvalidConfig(e.to_string()))?;
        cfg.plan()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Shape inference over the layer list.
    pub fn plan(&self) -> Result<Vec<LayerPlan>, NnError> {
        let err = |layer: usize, msg: String| NnError::ShapeMismatch {
            layer: Some(layer),
            msg,
        };
        if self.input_width == 0 {
            return Err(NnError::InvalidConfig(
                "input width must be positive".into(),
            ));
        }
        match self.layers.last() {
            Some(LayerSpec::SoftmaxCeHead { .. }) => {}
            _ => {
                return Err(NnError::InvalidConfig(
                    "last layer must be softmax_ce_head".into(),
                ))
            }
        }
        let mut shape = ActShape::Seq {
            channels: 1,
            len: self.input_width,
        };
        let mut plans = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let mut pad_left = 0;
            let output = match *spec {
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(err(i, "dense with zero units".into()));
                    }
                    ActShape::Flat { features: units }
                }
                LayerSpec::SoftmaxCeHead { classes } => {
                    if i + 1 != self.layers.len() {
                        return Err(err(i, "softmax_ce_head must be the last layer".into()));
                    }
                    if classes != N_CLASSES {
                        return Err(err(
                            i,
                            format!("head must have {N_CLASSES} classes, got {classes}"),
                        ));
                    }
                    ActShape::Flat { features: classes }
                }
                LayerSpec::Conv1d {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let ActShape::Seq { len, .. } = shape else {
                        return Err(err(i, "conv1d needs a sequence input".into()));
                    };
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(err(
                            i,
                            "conv1d filters, kernel and stride must be positive".into(),
                        ));
                    }
                    let out_len = match padding {
                        Padding::Valid => {
                            if len < kernel {
                                return Err(err(
                                    i,
                                    format!("kernel {kernel} longer than input {len}"),
                                ));
                            }
                            (len - kernel) / stride + 1
                        }
                        Padding::Same => {
                            let out = len.div_ceil(stride);
                            let total = ((out - 1) * stride + kernel).saturating_sub(len);
                            pad_left = total.div_ceil(2);
                            out
                        }
                    };
                    ActShape::Seq {
                        channels: filters,
                        len: out_len,
                    }
                }
                LayerSpec::BatchNorm { momentum, eps } => {
                    if !(0.0..1.0).contains(&momentum) || eps <= 0.0 {
                        return Err(err(
                            i,
                            "batchnorm needs momentum in [0,1) and eps > 0".into(),
                        ));
                    }
                    shape
                }
                LayerSpec::Relu => shape,
                LayerSpec::AvgPool { width } | LayerSpec::MaxPool { width } => {
                    let ActShape::Seq { channels, len } = shape else {
                        return Err(err(i, "pooling needs a sequence input".into()));
                    };
                    if width == 0 || len < width {
                        return Err(err(
                            i,
                            format!("pool width {width} invalid for length {len}"),
                        ));
                    }
                    ActShape::Seq {
                        channels,
                        len: len / width,
                    }
                }
                LayerSpec::Flatten => ActShape::Flat {
                    features: shape.size(),
                },
            };
            plans.push(LayerPlan {
                spec: spec.clone(),
                input: shape,
                output,
                pad_left,
            });
            shape = output;
        }
        Ok(plans)
    }

    /// Trainable parameter count (weights, biases, batchnorm scale/shift).
    pub fn param_count(&self) -> Result<usize, NnError> {
        Ok(self.plan()?.iter().map(layer_param_count).sum())
    }
}

pub(crate) fn layer_param_count(p: &LayerPlan) -> usize {
    match p.spec {
        LayerSpec::Dense { units } => p.input.size() * units + units,
        LayerSpec::SoftmaxCeHead { classes } => p.input.size() * classes + classes,
        LayerSpec::Conv1d {
            filters, kernel, ..
        } => filters * p.input.cl().0 * kernel + filters,
        LayerSpec::BatchNorm { .. } => 2 * p.input.cl().0,
        _ => 0,
    }
}
