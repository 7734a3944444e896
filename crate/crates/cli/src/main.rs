//! `qfleet`: generate datasets, train, evaluate, run the V2X ablation and
//! the gradient suite.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration error, 3 I/O
//! error, 4 compatibility error. Any `--section.key=value` flag overrides one
//! field of the run configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qfleet_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use qfleet_core::config::RunConfig;
use qfleet_core::dataset::{generate_dataset, Dataset, Split};
use qfleet_core::fleet::V2XConfig;
use qfleet_core::train::{ablate, ablation_csv, evaluate, metrics_jsonl, train_with_log};
use qfleet_core::verify::run_suite;
use qfleet_core::{Error, ErrorCategory, OpKind, Result};

#[derive(Parser)]
#[command(name = "qfleet", version, about = "Multi-agent temporal-query accident detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scenario dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed; overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write its best checkpoint and epoch metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
        /// Run config whose `v2x` section must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and test one model per V2X configuration.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the backward rule of one op (harness self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

/// Split `--a.b=value` / `--a.b value` overrides from the arguments clap
/// should see.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--").filter(|b| b.contains('.')) else {
            rest.push(arg);
            continue;
        };
        match body.split_once('=') {
            Some((k, v)) if k.contains('.') => overrides.push((k.to_string(), v.to_string())),
            Some(_) => rest.push(arg),
            None => {
                let v = it.next().unwrap_or_default();
                overrides.push((body.to_string(), v));
            }
        }
    }
    (rest, overrides)
}

fn read_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    RunConfig::load(text.as_deref(), overrides)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn with_seed(mut overrides: Vec<(String, String)>, key: &str, seed: Option<u64>) -> Vec<(String, String)> {
    if let Some(s) = seed {
        overrides.push((key.to_string(), s.to_string()));
    }
    overrides
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let cfg = read_config(config.as_deref(), &with_seed(overrides, "data.seed", seed))?;
            eprintln!("generating {} scenarios (seed {})", cfg.data.count, cfg.data.seed);
            generate_dataset(cfg.data.count, &cfg.data.families, cfg.data.seed, &out)?;
            write(&out.join("config.json"), cfg.to_json()?)?;
            println!("{}", out.join("manifest.json").display());
        }
        Command::Train { config, data, out, seed } => {
            let cfg = read_config(config.as_deref(), &with_seed(overrides, "train.seed", seed))?;
            let dataset = Dataset::load(&data)?;
            create_dir(&out)?;
            write(&out.join("config.json"), cfg.to_json()?)?;
            let outcome = train_with_log(&dataset, &cfg.model, &cfg.train, |m| {
                eprintln!(
                    "epoch {}: loss {:.6} val acc {:.4} lr {:.3e}",
                    m.epoch, m.mean_train_loss, m.val_accuracy, m.lr
                )
            })?;
            write(&out.join("metrics.jsonl"), metrics_jsonl(&outcome.metrics)?)?;
            let ckpt_path = out.join("model.ckpt");
            save_checkpoint(&ckpt_path, &Checkpoint::from_model(&outcome.model, &cfg.train))?;
            eprintln!("best epoch {}", outcome.best_epoch);
            println!("{}", ckpt_path.display());
        }
        Command::Eval {
            ckpt,
            data,
            split,
            report,
            config,
        } => {
            let split: Split = split.parse()?;
            let ck = load_checkpoint(&ckpt)?;
            let v2x: V2XConfig = if config.is_some() || !overrides.is_empty() {
                read_config(config.as_deref(), &overrides)?.v2x
            } else {
                ck.v2x.clone()
            };
            let model = ck.into_model(&v2x)?;
            let dataset = Dataset::load(&data)?;
            let r = evaluate(&model, &dataset, split, &v2x)?;
            let mut json = serde_json::to_string_pretty(&r)?;
            json.push('\n');
            write(&report, json)?;
            eprintln!("tp {} tn {} fp {} fn {}", r.tp, r.tn, r.fp, r.fn_);
            println!("{:.4}", r.accuracy);
        }
        Command::Ablate { config, data, out, seed } => {
            let cfg = read_config(config.as_deref(), &with_seed(overrides, "train.seed", seed))?;
            let dataset = Dataset::load(&data)?;
            create_dir(&out)?;
            write(&out.join("config.json"), cfg.to_json()?)?;
            let configs = V2XConfig::table_rows();
            for (i, v) in configs.iter().enumerate() {
                eprintln!("row {}: agents {:?}", i + 1, v.roles().collect::<Vec<_>>());
            }
            let rows = ablate(&dataset, &cfg.model, &cfg.train, &configs)?;
            let csv = ablation_csv(&rows);
            write(&out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Gradcheck { seed, inject_fault } => {
            let fault = match inject_fault {
                Some(name) => Some(
                    OpKind::from_name(&name).ok_or_else(|| Error::Config(format!("unknown op `{name}`")))?,
                ),
                None => None,
            };
            let report = run_suite(seed, fault)?;
            for r in &report.results {
                println!(
                    "{:<26} max_rel_err {:.3e}  tol {:.0e}  {}",
                    r.name,
                    r.max_rel_err,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            if !report.passed() {
                let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
                eprintln!("gradient check failed: {}", failed.join(", "));
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Io => 3,
        ErrorCategory::Compatibility => 4,
        ErrorCategory::Internal => 1,
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
