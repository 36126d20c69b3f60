use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use protograph::commands::{cmd_eval, cmd_export_graph, cmd_gradcheck, cmd_synth, cmd_train, TrainArgs};
use protograph::error::{AppError, AppResult};
use protograph::manifest::Split;
use protograph::run_config::{resolve_seed, seed_from_env};

/// Prototype-graph classifier for 3-D volumes.
///
/// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
/// PROTOGRAPH_SEED overrides the configured seed; --seed overrides both.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth {
        /// JSON synth spec; defaults apply to missing fields, or to all when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoint, history, hierarchy and adjacency.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; overrides data.dir in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; overrides output in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print and save ACC, SEN, SPE and AUC of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Metrics JSON path; defaults to metrics_<split>.json beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one volume's prototype graph as JSON.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Edges with effective weight at or below this are dropped.
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
    },
    /// Check every backward rule against finite differences.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        scale: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Add an op with a deliberately wrong backward rule.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn run(cli: Cli) -> AppResult<()> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Synth { spec, out: dir, seed } => {
            let seed = resolve_seed(seed, seed_from_env().as_deref(), 0)?;
            cmd_synth(spec.as_deref(), &dir, seed, &mut out)
        }
        Command::Train { config, data, out: dir, resume, seed } => {
            let args = TrainArgs {
                config: &config,
                data: data.as_deref(),
                out: dir.as_deref(),
                resume: resume.as_deref(),
                seed,
                env_seed: seed_from_env(),
            };
            cmd_train(&args, &mut out).map(drop)
        }
        Command::Eval { checkpoint, data, split, out: file } => {
            let split: Split = split.parse()?;
            cmd_eval(&checkpoint, &data, split, file.as_deref(), &mut out).map(drop)
        }
        Command::ExportGraph { checkpoint, volume, out: file, threshold } => {
            cmd_export_graph(&checkpoint, &volume, &file, threshold, &mut out).map(drop)
        }
        Command::Gradcheck { scale, seeds, inject_fault } => {
            let summaries = cmd_gradcheck(&scale, seeds, inject_fault, &mut out)?;
            let failed: Vec<&str> = summaries.iter().filter(|s| !s.passed()).map(|s| s.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(AppError::Numerical(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
