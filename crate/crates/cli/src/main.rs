//! `flare-ssm` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flare_ssm_core::config::RunConfig;
use flare_ssm_core::error::TrainError;
use flare_ssm_core::events::EventLog;
use flare_ssm_core::pipeline;

#[derive(Parser)]
#[command(
    name = "flare-ssm",
    version,
    about = "Solar flare forecasting on synthetic full-disk imagery: dataset \
             generation, sparse-MAE pretraining, two-stage training, and \
             forecast verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct CommonArgs {
    /// Key/value configuration file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fold id (1-3).
    #[arg(long)]
    fold: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset directory.
    Generate(CommonArgs),
    /// Pretrain the sparse masked autoencoder for one fold.
    Pretrain(CommonArgs),
    /// Two-stage training for one fold.
    Train(CommonArgs),
    /// Evaluate a trained fold (or all folds when --fold is omitted).
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Recompute metrics from a prediction file.
    Metrics {
        #[command(flatten)]
        common: CommonArgs,
        /// Prediction CSV (timestamp, p_X, p_M, p_C, p_O, label).
        #[arg(long)]
        pred: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn load_config(common: &CommonArgs) -> Result<RunConfig, u8> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| {
            eprintln!("config error: {e}");
            EXIT_CONFIG
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(fold) = common.fold {
        cfg.fold = fold;
    }
    cfg.validate().map_err(|e| {
        eprintln!("config error: {e}");
        EXIT_CONFIG
    })?;
    Ok(cfg)
}

fn train_error_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Numerical(_) | TrainError::Metrics(_) | TrainError::Tensor(_) => EXIT_NUMERICAL,
        TrainError::Data(_) | TrainError::Checkpoint(_) | TrainError::Io(_) => EXIT_DATA,
    }
}

fn artifacts_dir(common: &CommonArgs) -> Result<PathBuf, u8> {
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&out).map_err(|e| {
        eprintln!("cannot create {}: {e}", out.display());
        EXIT_DATA
    })?;
    Ok(out)
}

fn run() -> Result<(), u8> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(common) => {
            let mut cfg = load_config(&common)?;
            if let Some(out) = &common.out {
                cfg.data_dir = out.display().to_string();
            }
            let mut log = EventLog::stdout();
            pipeline::cmd_generate(&cfg, &mut log).map_err(|e| {
                eprintln!("generate failed: {e}");
                train_error_code(&e)
            })?;
            Ok(())
        }
        Command::Pretrain(common) => {
            let cfg = load_config(&common)?;
            let out = artifacts_dir(&common)?;
            let mut log = EventLog::with_dir(&out, false).unwrap_or_else(|_| EventLog::stdout());
            pipeline::cmd_pretrain(&cfg, &out, &mut log).map_err(|e| {
                eprintln!("pretrain failed: {e}");
                train_error_code(&e)
            })?;
            Ok(())
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let out = artifacts_dir(&common)?;
            let mut log = EventLog::with_dir(&out, false).unwrap_or_else(|_| EventLog::stdout());
            pipeline::cmd_train(&cfg, &out, &mut log).map_err(|e| {
                eprintln!("train failed: {e}");
                train_error_code(&e)
            })?;
            Ok(())
        }
        Command::Eval { common, split } => {
            let cfg = load_config(&common)?;
            let out = artifacts_dir(&common)?;
            let mut log = EventLog::with_dir(&out, false).unwrap_or_else(|_| EventLog::stdout());
            let result = match common.fold {
                Some(fold) => pipeline::cmd_eval(&cfg, &out, fold, &split, &mut log).map(|_| ()),
                None => pipeline::cmd_eval_all_folds(&cfg, &out, &split, &mut log).map(|_| ()),
            };
            result.map_err(|e| {
                eprintln!("eval failed: {e}");
                train_error_code(&e)
            })
        }
        Command::Metrics { pred, .. } => {
            let report = pipeline::cmd_metrics(&pred).map_err(|e| {
                eprintln!("metrics failed: {e}");
                train_error_code(&e)
            })?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
