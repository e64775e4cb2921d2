//! Experiment descriptions and the runners behind each command-line
//! subcommand.
//!
//! An experiment is one JSON document with `data`, `model`, `train`,
//! `attack`, `lr_find` and `analysis` sections. Dotted overrides such as
//! `train.epochs=5` are applied to the parsed JSON before it is typed.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::analysis::{
    export_csv, export_table, saliency, snr_by, AnalysisError, Partition, SnrReport,
};
use crate::attack::{guessing_entropy, AttackError, GeConfig, GeCurve};
use crate::nn::{build_model, LayerSpec, ModelConfig, NnError, Precision, Scalar};
use crate::optim::{LrCurve, LrFindConfig};
use crate::rng::{derive_seed, streams};
use crate::synth::{generate, Key16, KeyMode, SynthConfig, SynthError};
use crate::trace::{
    load_traceset, save_traceset, PreprocessMode, PreprocessStats, TraceError, TraceSet,
    DEFAULT_TARGET_BYTE,
};
use crate::train::{
    checkpoint_load, checkpoint_save, lr_find_model, EpochRecord, FitOptions, FitOutput, GeEval,
    TrainConfig, TrainError, TrainObserver, TrainState,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// The experiment description itself is wrong; the CLI reports these
    /// as usage errors.
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    pub fn is_usage(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
            || matches!(self, ExperimentError::Train(TrainError::InvalidConfig(_)))
            || matches!(self, ExperimentError::Synth(SynthError::InvalidConfig(_)))
            || matches!(
                self,
                ExperimentError::Nn(NnError::InvalidConfig(_) | NnError::UnknownPreset(_))
            )
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

/// The AES-128 key of the FIPS-197 example, used for generated attack sets.
pub const DEFAULT_ATTACK_KEY: [u8; 16] = [
    0x2b, 0x7e, 0x15, 0x16, 0x28, 0xae, 0xd2, 0xa6, 0xab, 0xf7, 0x15, 0x88, 0x09, 0xcf, 0x4f, 0x3c,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Standardize {
    None,
    #[default]
    Pointwise,
    Global,
}

fn default_target_byte() -> usize {
    DEFAULT_TARGET_BYTE
}
fn default_attack_traces() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Profiling traces from a SCAT file ...
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// ... or generated.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub attack_path: Option<PathBuf>,
    /// Attack set generator. When absent with `synth` present, the attack
    /// set is `synth` with a fixed key, `attack_traces` traces and a seed
    /// from the attack-data stream.
    #[serde(default)]
    pub attack_synth: Option<SynthConfig>,
    #[serde(default = "default_attack_traces")]
    pub attack_traces: usize,
    #[serde(default = "default_target_byte")]
    pub target_byte: usize,
    #[serde(default)]
    pub window: Option<Window>,
    #[serde(default)]
    pub standardize: Standardize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "default_repetitions", alias = "R")]
    pub repetitions: usize,
    pub max_traces: usize,
    #[serde(default = "default_step")]
    pub step: usize,
}

fn default_repetitions() -> usize {
    100
}
fn default_step() -> usize {
    1
}
fn default_partition() -> Partition {
    Partition::Label
}
fn default_saliency_traces() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_partition")]
    pub partition: Partition,
    /// Traces used for saliency maps.
    #[serde(default = "default_saliency_traces")]
    pub saliency_traces: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            partition: default_partition(),
            saliency_traces: default_saliency_traces(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When present, the single source of randomness: it replaces the
    /// seeds of the data generators (through the data and attack-data
    /// streams), of training and of the attack.
    #[serde(default)]
    pub seed: Option<u64>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub lr_find: Option<LrFindConfig>,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

/// Applies `key=value` overrides to a JSON document. Keys are dotted paths
/// (`train.optimizer.base_lr`, `model.layers.0.units`); values are parsed
/// as JSON and fall back to plain strings. Repeating a key is an error.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| {
            ExperimentError::Config(format!("override `{item}` is not key=value"))
        })?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(ExperimentError::Config(format!("bad override key `{key}`")));
        }
        if !seen.insert(key.to_string()) {
            return Err(ExperimentError::Config(format!(
                "override `{key}` given more than once"
            )));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(doc, key, value)?;
    }
    Ok(())
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| {
                    ExperimentError::Config(format!("`{key}`: `{part}` is not an array index"))
                })?;
                let len = items.len();
                items.get_mut(idx).ok_or_else(|| {
                    ExperimentError::Config(format!("`{key}`: index {idx} out of range ({len})"))
                })?
            }
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut()
                    .expect("just created")
                    .entry(*part)
                    .or_insert(Value::Null)
            }
            Value::Object(map) => map.entry(*part).or_insert(Value::Null),
            _ => {
                return Err(ExperimentError::Config(format!(
                    "`{key}`: cannot descend into a scalar at `{part}`"
                )))
            }
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    unreachable!("split always yields at least one part")
}

impl ExperimentConfig {
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let doc: Value =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        Self::from_value(doc, overrides)
    }

    pub fn from_value(mut doc: Value, overrides: &[String]) -> Result<Self> {
        apply_overrides(&mut doc, overrides)?;
        let cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.data.path.is_some() == self.data.synth.is_some() {
            return bad("data needs exactly one of `path` and `synth`".into());
        }
        if self.data.attack_path.is_some() && self.data.attack_synth.is_some() {
            return bad("data has both `attack_path` and `attack_synth`".into());
        }
        if self.data.target_byte >= 16 {
            return bad(format!(
                "target_byte {} out of range",
                self.data.target_byte
            ));
        }
        if let Some(m) = &self.model {
            match (&m.preset, &m.layers) {
                (Some(p), None) => {
                    ModelConfig::preset(p, 1)?;
                }
                (None, Some(_)) => {}
                _ => return bad("model needs exactly one of `preset` and `layers`".into()),
            }
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = self
            .train
            .clone()
            .ok_or_else(|| ExperimentError::Config("missing `train` section".into()))?;
        if let Some(seed) = self.seed {
            t.seed = seed;
        }
        Ok(t)
    }

    fn attack_section(&self) -> Result<AttackSection> {
        self.attack
            .ok_or_else(|| ExperimentError::Config("missing `attack` section".into()))
    }

    pub fn ge_config(&self) -> Result<GeConfig> {
        let a = self.attack_section()?;
        let seed = self
            .seed
            .unwrap_or_else(|| self.train.as_ref().map_or(0, |t| t.seed));
        Ok(GeConfig {
            repetitions: a.repetitions,
            max_traces: a.max_traces,
            step: a.step,
            seed,
        })
    }

    /// Seed for weight initialization.
    pub fn init_seed(&self) -> u64 {
        derive_seed(
            self.seed
                .unwrap_or_else(|| self.train.as_ref().map_or(0, |t| t.seed)),
            streams::INIT,
        )
    }

    pub fn profiling_synth(&self) -> Option<SynthConfig> {
        let mut s = self.data.synth.clone()?;
        if let Some(seed) = self.seed {
            s.seed = derive_seed(seed, streams::DATA);
        }
        Some(s)
    }

    pub fn attack_synth(&self) -> Option<SynthConfig> {
        let mut s = match (&self.data.attack_synth, &self.data.synth) {
            (Some(a), _) => a.clone(),
            (None, Some(p)) if self.data.attack_path.is_none() => SynthConfig {
                n_traces: self.data.attack_traces,
                key_mode: KeyMode::Fixed(Key16(DEFAULT_ATTACK_KEY)),
                seed: derive_seed(p.seed, streams::ATTACK_DATA),
                ..p.clone()
            },
            _ => return None,
        };
        if let Some(seed) = self.seed {
            s.seed = derive_seed(seed, streams::ATTACK_DATA);
        }
        Some(s)
    }

    /// Model architecture for inputs of `width` samples.
    pub fn model_config(&self, width: usize) -> Result<ModelConfig> {
        let m = self
            .model
            .as_ref()
            .ok_or_else(|| ExperimentError::Config("missing `model` section".into()))?;
        Ok(match (&m.preset, &m.layers) {
            (Some(p), _) => ModelConfig::preset(p, width)?,
            (None, Some(layers)) => ModelConfig::new(width, layers.clone()),
            (None, None) => {
                return Err(ExperimentError::Config(
                    "model needs `preset` or `layers`".into(),
                ))
            }
        })
    }

    fn precision(&self) -> Precision {
        self.train.as_ref().map_or(Precision::F32, |t| t.precision)
    }
}

/// Raw profiling traces, before windowing or standardization.
pub fn raw_profiling(cfg: &ExperimentConfig) -> Result<TraceSet> {
    match (&cfg.data.path, cfg.profiling_synth()) {
        (Some(p), _) => Ok(load_traceset(p)?),
        (None, Some(s)) => Ok(generate(&s)?),
        (None, None) => Err(ExperimentError::Config("no profiling data".into())),
    }
}

pub fn raw_attack(cfg: &ExperimentConfig) -> Result<TraceSet> {
    match (&cfg.data.attack_path, cfg.attack_synth()) {
        (Some(p), _) => Ok(load_traceset(p)?),
        (None, Some(s)) => Ok(generate(&s)?),
        (None, None) => Err(ExperimentError::Config(
            "no attack data: set `data.attack_path` or `data.attack_synth`".into(),
        )),
    }
}

fn shape(cfg: &ExperimentConfig, ts: TraceSet) -> Result<TraceSet> {
    let ts = match cfg.data.window {
        Some(w) => ts.window(w.start, w.len)?,
        None => ts,
    };
    if ts.meta.labels.is_some() {
        Ok(ts)
    } else {
        Ok(ts.derive_labels(cfg.data.target_byte)?)
    }
}

fn preprocess_mode(s: Standardize) -> Option<PreprocessMode> {
    match s {
        Standardize::None => None,
        Standardize::Pointwise => Some(PreprocessMode::Pointwise),
        Standardize::Global => Some(PreprocessMode::Global),
    }
}

/// Windowed, labelled and standardized profiling traces, with the
/// statistics that must be applied to the attack traces.
pub fn profiling_set(cfg: &ExperimentConfig) -> Result<(TraceSet, Option<PreprocessStats>)> {
    let ts = shape(cfg, raw_profiling(cfg)?)?;
    match preprocess_mode(cfg.data.standardize) {
        None => Ok((ts, None)),
        Some(mode) => {
            let stats = PreprocessStats::fit(&ts, mode, crate::trace::DEFAULT_EPSILON)?;
            Ok((stats.apply(&ts)?, Some(stats)))
        }
    }
}

/// Attack traces, standardized with the profiling statistics.
pub fn attack_set(cfg: &ExperimentConfig, stats: Option<&PreprocessStats>) -> Result<TraceSet> {
    let ts = shape(cfg, raw_attack(cfg)?)?;
    match stats {
        Some(s) => Ok(s.apply(&ts)?),
        None => Ok(ts),
    }
}

/// Writes the generated profiling (or attack) set to `out`.
pub fn run_gen(cfg: &ExperimentConfig, attack: bool, out: &Path) -> Result<TraceSet> {
    let ts = if attack {
        raw_attack(cfg)?
    } else {
        raw_profiling(cfg)?
    };
    save_traceset(&ts, out)?;
    Ok(ts)
}

/// SNR of the windowed profiling traces (no standardization: SNR is
/// invariant to it), written as `index,snr`.
pub fn run_snr(cfg: &ExperimentConfig, out: &Path) -> Result<SnrReport> {
    let raw = raw_profiling(cfg)?;
    let ts = match cfg.data.window {
        Some(w) => raw.window(w.start, w.len)?,
        None => raw,
    };
    let report = snr_by(&ts, cfg.analysis.partition, cfg.data.target_byte)?;
    export_csv(&[("snr", &report.values)], out)?;
    Ok(report)
}

/// Learning-rate sweep, written as `lr,raw_loss,smoothed_loss`.
pub fn run_lr_find(cfg: &ExperimentConfig, out: &Path) -> Result<LrCurve> {
    match cfg.precision() {
        Precision::F32 => lr_find_typed::<f32>(cfg, out),
        Precision::F64 => lr_find_typed::<f64>(cfg, out),
    }
}

fn lr_find_typed<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<LrCurve> {
    let sweep = cfg
        .lr_find
        .ok_or_else(|| ExperimentError::Config("missing `lr_find` section".into()))?;
    let train = cfg.train_config()?;
    let (ts, _) = profiling_set(cfg)?;
    let model = build_model::<T>(&cfg.model_config(ts.n_samples())?, cfg.init_seed())?;
    let curve = lr_find_model(model, &ts, &train, &sweep)?;
    export_table(
        &[
            ("lr", &curve.lrs),
            ("raw_loss", &curve.raw_losses),
            ("smoothed_loss", &curve.smoothed),
        ],
        out,
    )?;
    Ok(curve)
}

const HISTORY: &str = "history.jsonl";
const PREPROCESS: &str = "preprocess.json";

/// Appends every epoch record to `history.jsonl` as it completes, so the
/// file holds exactly the completed epochs even after a failure, and
/// optionally checkpoints every `every` epochs.
struct RunObserver {
    dir: PathBuf,
    history: fs::File,
    timing: Vec<(usize, f64)>,
    checkpoint_every: Option<usize>,
    stats: Option<PreprocessStats>,
}

impl<T: Scalar> TrainObserver<T> for RunObserver {
    fn on_epoch(
        &mut self,
        record: &EpochRecord,
        state: &TrainState<T>,
    ) -> std::result::Result<(), TrainError> {
        writeln!(self.history, "{}", serde_json::to_string(record)?)?;
        self.history.flush()?;
        self.timing.push((record.epoch, record.wall_time_s));
        if let Some(every) = self.checkpoint_every {
            if record.epoch.is_multiple_of(every) {
                let dir = self.dir.join(format!("ckpt_epoch{:03}", record.epoch));
                checkpoint_save(state, &dir)?;
                write_stats(&dir, self.stats.as_ref())?;
            }
        }
        Ok(())
    }
}

fn write_stats(dir: &Path, stats: Option<&PreprocessStats>) -> std::result::Result<(), TrainError> {
    if let Some(s) = stats {
        let mut text = serde_json::to_string_pretty(s)?;
        text.push('\n');
        fs::write(dir.join(PREPROCESS), text)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainRun {
    pub history: Vec<EpochRecord>,
    pub final_ckpt: PathBuf,
    pub swa_ckpt: Option<PathBuf>,
}

/// Trains and writes `history.jsonl`, `metrics.csv`, `timing.csv`,
/// `ckpt_final/` and, with SWA, `ckpt_swa/` under `out`. With `resume`,
/// training continues from that checkpoint.
pub fn run_train(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    checkpoint_every: Option<usize>,
) -> Result<TrainRun> {
    match cfg.precision() {
        Precision::F32 => train_typed::<f32>(cfg, out, resume, checkpoint_every),
        Precision::F64 => train_typed::<f64>(cfg, out, resume, checkpoint_every),
    }
}

fn train_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    checkpoint_every: Option<usize>,
) -> Result<TrainRun> {
    let train = cfg.train_config()?;
    let (ts, stats) = profiling_set(cfg)?;
    let model_cfg = cfg.model_config(ts.n_samples())?;
    let state = match resume {
        Some(dir) => checkpoint_load::<T>(dir, Some(&model_cfg))?,
        None => TrainState::new(
            build_model::<T>(&model_cfg, cfg.init_seed())?,
            train.optimizer.kind,
        ),
    };
    let attack = match (train.eval_ge_every, cfg.attack) {
        (Some(_), Some(_)) => Some(attack_set(cfg, stats.as_ref())?),
        _ => None,
    };
    let ge_eval = match &attack {
        Some(a) => Some(GeEval {
            attack: a,
            config: cfg.ge_config()?,
            target_byte: cfg.data.target_byte,
        }),
        None => None,
    };

    fs::create_dir_all(out)?;
    let history_path = out.join(HISTORY);
    // a resumed run continues the existing history
    let history = if resume.is_some() && history_path.exists() {
        truncate_history(&history_path, state.epoch)?;
        fs::OpenOptions::new().append(true).open(&history_path)?
    } else {
        fs::File::create(&history_path)?
    };
    let mut obs = RunObserver {
        dir: out.to_path_buf(),
        history,
        timing: vec![],
        checkpoint_every,
        stats: stats.clone(),
    };
    let result = crate::train::fit(
        state,
        &ts,
        &train,
        FitOptions {
            ge_eval,
            observer: Some(&mut obs),
        },
    );
    write_timing(out, &obs.timing)?;
    let FitOutput {
        state,
        swa_model,
        history,
    } = result?;

    write_metrics(out, &history)?;
    let final_ckpt = out.join("ckpt_final");
    checkpoint_save(&state, &final_ckpt)?;
    write_stats(&final_ckpt, stats.as_ref())?;
    let swa_ckpt = match swa_model {
        Some(m) => {
            let dir = out.join("ckpt_swa");
            let swa_state = TrainState {
                model: m,
                swa: None,
                ..state
            };
            checkpoint_save(&swa_state, &dir)?;
            write_stats(&dir, stats.as_ref())?;
            Some(dir)
        }
        None => None,
    };
    Ok(TrainRun {
        history,
        final_ckpt,
        swa_ckpt,
    })
}

fn truncate_history(path: &Path, epochs: usize) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let kept: String = text
        .lines()
        .take(epochs)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

fn write_metrics(out: &Path, history: &[EpochRecord]) -> Result<()> {
    let col = |f: &dyn Fn(&EpochRecord) -> f64| history.iter().map(f).collect::<Vec<f64>>();
    let epoch = col(&|r| r.epoch as f64);
    let train = col(&|r| r.train_loss);
    let ema = col(&|r| r.ema_loss);
    let val = col(&|r| r.val_loss.unwrap_or(f64::NAN));
    let lr = col(&|r| r.lr_last);
    let ge = col(&|r| r.ge_at_checkpoint.unwrap_or(f64::NAN));
    export_table(
        &[
            ("epoch", &epoch),
            ("train_loss", &train),
            ("ema_loss", &ema),
            ("val_loss", &val),
            ("lr_last", &lr),
            ("ge", &ge),
        ],
        out.join("metrics.csv"),
    )?;
    Ok(())
}

fn write_timing(out: &Path, timing: &[(usize, f64)]) -> Result<()> {
    let epoch: Vec<f64> = timing.iter().map(|t| t.0 as f64).collect();
    let secs: Vec<f64> = timing.iter().map(|t| t.1).collect();
    export_table(
        &[("epoch", &epoch), ("wall_time_s", &secs)],
        out.join("timing.csv"),
    )?;
    Ok(())
}

fn load_stats(ckpt: &Path) -> Result<Option<PreprocessStats>> {
    let path = ckpt.join(PREPROCESS);
    if path.exists() {
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    } else {
        Ok(None)
    }
}

/// Standardization statistics: those saved with the checkpoint, or else
/// refitted on the profiling set.
fn attack_stats(cfg: &ExperimentConfig, ckpt: &Path) -> Result<Option<PreprocessStats>> {
    if preprocess_mode(cfg.data.standardize).is_none() {
        return Ok(None);
    }
    match load_stats(ckpt)? {
        Some(s) => Ok(Some(s)),
        None => Ok(profiling_set(cfg)?.1),
    }
}

/// Guessing entropy of a checkpoint on the attack set, written as
/// `n_traces,mean_rank`.
pub fn run_attack(cfg: &ExperimentConfig, ckpt: &Path, out: &Path) -> Result<GeCurve> {
    let precision = crate::train::read_manifest_precision(ckpt)?;
    match precision {
        Precision::F32 => attack_typed::<f32>(cfg, ckpt, out),
        Precision::F64 => attack_typed::<f64>(cfg, ckpt, out),
    }
}

fn attack_typed<T: Scalar>(cfg: &ExperimentConfig, ckpt: &Path, out: &Path) -> Result<GeCurve> {
    let stats = attack_stats(cfg, ckpt)?;
    let ts = attack_set(cfg, stats.as_ref())?;
    let expected = match cfg.model {
        Some(_) => Some(cfg.model_config(ts.n_samples())?),
        None => None,
    };
    let state = checkpoint_load::<T>(ckpt, expected.as_ref())?;
    let curve = guessing_entropy(&state.model, &ts, cfg.data.target_byte, &cfg.ge_config()?)?;
    let n: Vec<f64> = curve.n_traces.iter().map(|&v| v as f64).collect();
    export_table(&[("n_traces", &n), ("mean_rank", &curve.mean_rank)], out)?;
    Ok(curve)
}

/// Saliency of a checkpoint on the first profiling traces, written as
/// `index,saliency`.
pub fn run_saliency(cfg: &ExperimentConfig, ckpt: &Path, out: &Path) -> Result<Vec<f64>> {
    match crate::train::read_manifest_precision(ckpt)? {
        Precision::F32 => saliency_typed::<f32>(cfg, ckpt, out),
        Precision::F64 => saliency_typed::<f64>(cfg, ckpt, out),
    }
}

fn saliency_typed<T: Scalar>(cfg: &ExperimentConfig, ckpt: &Path, out: &Path) -> Result<Vec<f64>> {
    let stats = attack_stats(cfg, ckpt)?;
    let ts = shape(cfg, raw_profiling(cfg)?)?;
    let ts = match &stats {
        Some(s) => s.apply(&ts)?,
        None => ts,
    };
    let n = cfg.analysis.saliency_traces.min(ts.n_traces());
    let ts = ts.select(&(0..n).collect::<Vec<_>>());
    let state = checkpoint_load::<T>(ckpt, None)?;
    let s = saliency(&state.model, &ts, 256)?;
    export_csv(&[("saliency", &s)], out)?;
    Ok(s)
}
