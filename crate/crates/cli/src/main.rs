//! `scaforge`: generate traces, measure leakage, train and attack.
//!
//! Exit status is 0 on success, 1 for usage errors (bad flags or config)
//! and 2 for failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scaforge_core::experiment::{self, ExperimentConfig, ExperimentError};
use scaforge_core::trace::read_header;
use serde_json::{json, Value};

const THREADS_ENV: &str = "SCAFORGE_THREADS";

#[derive(Parser)]
#[command(
    name = "scaforge",
    version,
    about = "Deep-learning profiling side-channel workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment description (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dotted override applied after parsing, e.g. `train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace set and write it as SCAT.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Write the attack set (fixed key) instead of the profiling set.
        #[arg(long)]
        attack: bool,
    },
    /// Signal-to-noise ratio per sample, as CSV.
    Snr {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learning-rate range test, as CSV.
    LrFind {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train a model; writes history, metrics and checkpoints to a directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also checkpoint every N epochs.
        #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
        checkpoint_every: Option<u64>,
    },
    /// Guessing entropy of a checkpoint on the attack set, as CSV.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a JSON summary here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Input-gradient saliency of a checkpoint, as CSV.
    Saliency {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the header of a SCAT file as JSON.
    Inspect { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Worker cap from the environment, if set.
fn thread_cap() -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

/// The largest worker count not above `cap` that still divides the batch.
fn capped_workers(requested: usize, batch: usize, cap: Option<usize>) -> usize {
    let limit = cap.map_or(requested, |c| requested.min(c)).max(1);
    (1..=limit)
        .rev()
        .find(|w| batch.is_multiple_of(*w))
        .unwrap_or(1)
}

fn load(
    args: &ConfigArgs,
    workers: Option<usize>,
    bare_synth: bool,
) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.config.display())))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.config.display())))?;
    let mut overrides = args.set.clone();
    // `gen` also accepts a bare generator config; its override keys are
    // relative to that document
    if bare_synth && doc.get("data").is_none() {
        doc = json!({ "data": { "synth": doc } });
        overrides
            .iter_mut()
            .for_each(|o| *o = format!("data.synth.{o}"));
    }
    if let Some(w) = workers {
        overrides.push(format!("train.workers={w}"));
    }
    let mut cfg = ExperimentConfig::from_value(doc, &overrides)?;
    let cap = thread_cap()?;
    if let Some(train) = cfg.train.as_mut() {
        train.workers = capped_workers(train.workers, train.batch_size, cap);
    }
    if let Some(cap) = cap {
        // a second build only fails if the pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cap)
            .build_global();
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.into()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { cfg, out, attack } => {
            let cfg = load(&cfg, None, true)?;
            let ts = experiment::run_gen(&cfg, attack, &out)?;
            println!(
                "wrote {} traces x {} samples to {}",
                ts.n_traces(),
                ts.n_samples(),
                out.display()
            );
        }
        Command::Snr { cfg, out } => {
            let cfg = load(&cfg, None, false)?;
            let report = experiment::run_snr(&cfg, &out)?;
            let peak = report.argmax().map(|i| (i, report.values[i]));
            println!(
                "{}",
                json!({ "partition": report.partition, "peak": peak, "degenerate": report.degenerate })
            );
        }
        Command::LrFind { cfg, out, workers } => {
            let cfg = load(&cfg, workers, false)?;
            let curve = experiment::run_lr_find(&cfg, &out)?;
            println!(
                "{}",
                json!({ "suggestion": curve.suggestion, "truncated_at": curve.truncated_at })
            );
        }
        Command::Train {
            cfg,
            out,
            workers,
            resume,
            checkpoint_every,
        } => {
            let cfg = load(&cfg, workers, false)?;
            let every = checkpoint_every.map(|n| n as usize);
            let run = experiment::run_train(&cfg, &out, resume.as_deref(), every)?;
            if let Some(last) = run.history.last() {
                println!(
                    "{}",
                    serde_json::to_string(last).map_err(|e| Failure::Runtime(e.into()))?
                );
            }
        }
        Command::Attack {
            cfg,
            ckpt,
            out,
            summary,
        } => {
            let cfg = load(&cfg, None, false)?;
            let curve = experiment::run_attack(&cfg, &ckpt, &out)?;
            let s = json!({
                "repetitions": curve.repetitions,
                "seed": curve.seed,
                "max_traces": curve.n_traces.last(),
                "final_mean_rank": curve.mean_rank.last(),
                "traces_to_zero": curve.traces_to_zero,
            });
            if let Some(path) = summary {
                write_json(&path, &s)?;
            }
            println!("{s}");
        }
        Command::Saliency { cfg, ckpt, out } => {
            let cfg = load(&cfg, None, false)?;
            let s = experiment::run_saliency(&cfg, &ckpt, &out)?;
            let peak = s
                .iter()
                .enumerate()
                .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                    Some((_, b)) if b >= v => best,
                    _ => Some((i, v)),
                });
            println!("{}", json!({ "peak": peak }));
        }
        Command::Inspect { path } => {
            let h = read_header(&path).map_err(|e| Failure::Runtime(e.into()))?;
            let v = json!({
                "version": h.version,
                "flags": h.flags,
                "n_traces": h.n_traces,
                "n_samples": h.n_samples,
                "dtype": h.dtype,
                "mask_len": h.mask_len,
                "has_key": h.flags & scaforge_core::trace::FLAG_KEY != 0,
                "has_plaintext": h.flags & scaforge_core::trace::FLAG_PLAINTEXT != 0,
                "has_masks": h.flags & scaforge_core::trace::FLAG_MASKS != 0,
                "has_labels": h.flags & scaforge_core::trace::FLAG_LABELS != 0,
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&v).map_err(|e| Failure::Runtime(e.into()))?
            );
        }
    }
    Ok(())
}
