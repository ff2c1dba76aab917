//! Command-line entry points: `train`, `predict`, `evaluate`, `synth`.
//!
//! Configuration comes from a declarative JSON file with CLI overrides; the
//! `PROBSTEREO_OUT_ROOT` environment variable prefixes relative output
//! paths. Exit codes: 0 success, 2 configuration, 3 data/I-O, 4 numerical
//! failure, 5 shape errors.

use clap::{Parser, Subcommand};
use probstereo::data::dataset::materialize_synth;
use probstereo::data::{DatasetSpec, DomainShift, SynthParams};
use probstereo::error::{Error, Result};
use probstereo::evaluate::run_evaluate;
use probstereo::predict::run_predict;
use probstereo::train::{run_train, TrainConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "probstereo", version, about = "Probabilistic dense stereo matching with uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config file.
    Train {
        /// Path to a TrainConfig JSON document.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Learning rate override.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Monte-Carlo prediction for one image pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Number of stochastic passes.
        #[arg(long, default_value_t = probstereo::inference::DEFAULT_PREDICTION_COUNT)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a prediction directory against ground truth.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Ground truth: a dataset directory or a DatasetSpec JSON file.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sparsification density steps.
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Materialise a synthetic stereogram dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 14)]
        max_disparity: usize,
        #[arg(long, default_value_t = 0.35)]
        dot_density: f64,
        #[arg(long, default_value_t = 3)]
        shapes: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Appearance shift: none, invert_contrast, add_noise, texture_swap.
        #[arg(long, default_value = "none")]
        shift: String,
    },
}

fn out_root() -> Option<PathBuf> {
    std::env::var_os("PROBSTEREO_OUT_ROOT").map(PathBuf::from)
}

/// Relative output paths land under `PROBSTEREO_OUT_ROOT` when it is set.
fn resolve_out(path: &Path) -> PathBuf {
    match out_root() {
        Some(root) if path.is_relative() => root.join(path),
        _ => path.to_path_buf(),
    }
}

fn parse_shift(s: &str) -> Result<DomainShift> {
    match s {
        "none" => Ok(DomainShift::None),
        "invert_contrast" => Ok(DomainShift::InvertContrast),
        "add_noise" => Ok(DomainShift::AddNoise),
        "texture_swap" => Ok(DomainShift::TextureSwap),
        other => Err(Error::Config(format!("unknown domain shift {other:?}"))),
    }
}

fn load_gt_spec(path: &Path) -> Result<DatasetSpec> {
    if path.is_dir() {
        return Ok(DatasetSpec::PfmDir {
            root: path.to_path_buf(),
            quarter_resolution: false,
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("dataset spec parse: {e}")))
}

/// Every run leaves a self-describing record next to its outputs.
fn write_run_record(dir: &Path, record: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("run.json");
    let full = serde_json::json!({
        "tool": "probstereo",
        "version": env!("CARGO_PKG_VERSION"),
        "argv": std::env::args().collect::<Vec<_>>(),
        "run": record,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&full).unwrap())
        .map_err(|e| Error::io(&path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            epochs,
            seed,
            checkpoint,
            loss_log,
            max_steps,
            lr,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let mut cfg: TrainConfig =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = checkpoint {
                cfg.checkpoint_path = v;
            }
            if let Some(v) = loss_log {
                cfg.loss_log_path = Some(v);
            }
            if let Some(v) = max_steps {
                cfg.max_steps = Some(v);
            }
            if let Some(v) = lr {
                cfg.learning_rate = v;
            }
            cfg.checkpoint_path = resolve_out(&cfg.checkpoint_path);
            if let Some(p) = &cfg.loss_log_path {
                cfg.loss_log_path = Some(resolve_out(p));
            }
            if let Some(dir) = cfg.checkpoint_path.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
            }

            let outcome = run_train(&cfg)?;
            println!(
                "trained {} step(s) in {:.1}s; checkpoint at {}",
                outcome.steps,
                outcome.wall_seconds,
                outcome.checkpoint_path.display()
            );
            if let Some(m) = &outcome.final_metrics {
                println!(
                    "validation: bad1 {:.2}% bad3 {:.2}% bad5 {:.2}% MAE {:.3}px RMSE {:.3}px",
                    m.bad1, m.bad3, m.bad5, m.mae, m.rmse
                );
            }
            if let Some(dir) = outcome.checkpoint_path.parent() {
                write_run_record(
                    dir,
                    serde_json::json!({
                        "command": "train",
                        "config": cfg,
                        "steps": outcome.steps,
                        "kl_weight": outcome.kl_weight,
                        "wall_seconds": outcome.wall_seconds,
                        "final_metrics": outcome.final_metrics,
                    }),
                )?;
            }
            Ok(())
        }
        Command::Predict {
            checkpoint,
            left,
            right,
            t,
            seed,
            out,
        } => {
            let out = resolve_out(&out);
            let outcome = run_predict(&checkpoint, &left, &right, t, seed, &out)?;
            println!("wrote {}", outcome.disparity_path.display());
            write_run_record(
                &out,
                serde_json::json!({
                    "command": "predict",
                    "checkpoint": checkpoint,
                    "left": left,
                    "right": right,
                    "t": t,
                    "seed": seed,
                    "stem": outcome.stem,
                }),
            )
        }
        Command::Evaluate {
            predictions,
            gt,
            out,
            steps,
        } => {
            let out = resolve_out(&out);
            let spec = load_gt_spec(&gt)?;
            let outputs = run_evaluate(&predictions, &spec, Some(&out), steps)?;
            let m = &outputs.summary.aggregate;
            println!(
                "aggregate: bad1 {:.2}% bad3 {:.2}% bad5 {:.2}% MAE {:.3}px RMSE {:.3}px over {} px",
                m.bad1, m.bad3, m.bad5, m.mae, m.rmse, m.n_valid
            );
            if let Some(a) = outputs.summary.ause_combined {
                println!("AUSE combined {a:.5}");
            }
            write_run_record(
                &out,
                serde_json::json!({
                    "command": "evaluate",
                    "predictions": predictions,
                    "gt": spec,
                    "steps": steps,
                    "aggregate": outputs.summary.aggregate,
                }),
            )
        }
        Command::Synth {
            out,
            count,
            seed,
            width,
            height,
            max_disparity,
            dot_density,
            shapes,
            noise,
            shift,
        } => {
            let out = resolve_out(&out);
            let params = SynthParams {
                width,
                height,
                max_disparity,
                dot_density,
                num_shapes: shapes,
                noise_stddev: noise,
                domain_shift: parse_shift(&shift)?,
            };
            params.validate()?;
            let manifest = materialize_synth(&params, count, seed, &out)?;
            println!("wrote {} sample(s) to {}", manifest.count, out.display());
            write_run_record(
                &out,
                serde_json::json!({
                    "command": "synth",
                    "params": params,
                    "count": count,
                    "seed": seed,
                }),
            )
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
