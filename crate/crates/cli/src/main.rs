use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfaf_cli::commands::{eval_cmd, gen_data, gradcheck_cmd, inspect_cmd, train_cmd, TrainArgs};
use dfaf_cli::config::SEED_ENV;
use dfaf_cli::{CliError, ConfigError, RunConfig};
use dfaf_core::OpKind;

#[derive(Parser)]
#[command(
    name = "dfaf",
    version,
    about = "Inter/intra-modality attention flow on synthetic visual questions"
)]
struct Cli {
    /// key = value config file ('#' starts a comment).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as a feature file.
    GenData { out: PathBuf },
    /// Train on a feature file and write a checkpoint.
    Train {
        data: PathBuf,
        checkpoint: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
        /// Also append per-epoch metrics to this JSON-lines file.
        #[arg(long, value_name = "PATH")]
        metrics: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint, overall and per question template.
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        /// Score every instance instead of the held-out tail.
        #[arg(long)]
        all: bool,
    },
    /// Compare backpropagated gradients with central differences.
    Gradcheck {
        #[arg(long, hide = true, value_name = "OP")]
        fault_inject: Option<String>,
    },
    /// Export attention weights and gates for one instance as JSON.
    Inspect {
        checkpoint: PathBuf,
        data: PathBuf,
        index: usize,
        out: PathBuf,
    },
}

fn load_config(cli: &Cli, base: RunConfig) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError {
            issues: vec![format!("{}: {e}", p.display())],
        })?),
        None => None,
    };
    let origin = cli
        .config
        .as_deref()
        .map(Path::display)
        .map(|d| d.to_string());
    let env_seed = std::env::var(SEED_ENV).ok();
    let file = match (&origin, &text) {
        (Some(o), Some(t)) => Some((o.as_str(), t.as_str())),
        _ => None,
    };
    Ok(RunConfig::resolve(
        base,
        file,
        env_seed.as_deref(),
        &cli.set,
    )?)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match &cli.command {
        Command::GenData { out: path } => {
            let cfg = load_config(cli, RunConfig::default())?;
            gen_data(&cfg, path, &mut out)?;
        }
        Command::Train {
            data,
            checkpoint,
            resume,
            metrics,
        } => {
            let cfg = load_config(cli, RunConfig::default())?;
            let args = TrainArgs {
                data,
                checkpoint,
                resume: resume.as_deref(),
                metrics: metrics.as_deref(),
            };
            train_cmd(&cfg, &args, &mut out)?;
        }
        Command::Eval {
            checkpoint,
            data,
            all,
        } => {
            eval_cmd(checkpoint, data, *all, &cli.set, &mut out)?;
        }
        Command::Gradcheck { fault_inject } => {
            let cfg = load_config(cli, RunConfig::gradcheck_defaults())?;
            let fault = match fault_inject {
                Some(name) => Some(
                    OpKind::parse(name)
                        .ok_or_else(|| CliError::Usage(format!("unknown op kind `{name}`")))?,
                ),
                None => None,
            };
            gradcheck_cmd(&cfg, fault, &mut out)?;
        }
        Command::Inspect {
            checkpoint,
            data,
            index,
            out: path,
        } => {
            inspect_cmd(checkpoint, data, *index, path, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
