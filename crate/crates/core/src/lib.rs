//! Profiling side-channel attack workbench.
//!
//! Generate or load power traces, measure leakage with SNR and saliency
//! maps, train compact neural classifiers, and evaluate key recovery with
//! key rank and guessing entropy.

pub mod analysis;
pub mod attack;
pub mod experiment;
pub mod ingest;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod trace;
pub mod train;

pub use analysis::{saliency, snr, snr_by, Partition, SnrReport};
pub use attack::{guessing_entropy, key_rank, GeConfig, GeCurve, ScoreAccumulator};
pub use experiment::{ExperimentConfig, ExperimentError};
pub use nn::{
    build_model, Gradients, LayerSpec, Mode, Model, ModelConfig, Precision, Scalar, Tensor,
};
pub use optim::{
    lr_find, LrCurve, LrFindConfig, OptimizerConfig, OptimizerKind, ScheduleConfig, ScheduleKind,
};
pub use synth::{generate, hamming_weight, KeyMode, SynthConfig};
pub use trace::{
    aes_sbox, load_traceset, save_traceset, Dtype, PreprocessMode, PreprocessStats, TraceMeta,
    TraceSet,
};
pub use train::{
    checkpoint_load, checkpoint_save, fit, fit_model, EpochRecord, TrainConfig, TrainError,
    TrainState,
};
