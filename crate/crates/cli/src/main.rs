//! `bia`: train image-perturbation generators against a substitute
//! classifier's features and evaluate cross-domain transferability.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use commands::CliError;
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bia", version, about = "feature-disruption attack toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Config document; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, repeatable: --set train.seed=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory for checkpoints and reports.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Print the resolved config and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a perturbation generator against the substitute's features.
    Train(RunArgs),
    /// Craft adversarial images for every image in a directory.
    Attack {
        /// Generator checkpoint (BIAF1 container).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of input images (png/jpg).
        #[arg(long)]
        input: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "runs/adv")]
        out: PathBuf,
        /// Perturbation budget on the 8-bit scale.
        #[arg(long, default_value_t = 10)]
        epsilon: u32,
    },
    /// Evaluate an attack's transferability against target models.
    Eval(RunArgs),
    /// Run a tap or normalization-parameter sweep.
    Sweep(RunArgs),
    /// Visualize generator block activations.
    Viz(RunArgs),
}

fn resolve_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::defaults();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env(std::env::vars())?;
    for set in &args.sets {
        let (key, value) = set
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set needs KEY=VALUE, got `{set}`")))?;
        cfg.set(key.trim(), value).map_err(CliError::from)?;
    }
    Ok(cfg)
}

fn configure_threads(cfg: &RunConfig) -> Result<(), CliError> {
    let n = cfg.get_usize("parallelism")?;
    if n > 0 {
        // ignore the error if a pool already exists (tests, repeated init)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let cfg = resolve_config(&args)?;
            if args.dump_config {
                print!("{}", cfg.to_document());
                return Ok(());
            }
            configure_threads(&cfg)?;
            commands::cmd_train(&cfg, &args.out)
        }
        Command::Attack { checkpoint, input, out, epsilon } => {
            commands::cmd_attack(&checkpoint, &input, &out, epsilon)
        }
        Command::Eval(args) => {
            let cfg = resolve_config(&args)?;
            if args.dump_config {
                print!("{}", cfg.to_document());
                return Ok(());
            }
            configure_threads(&cfg)?;
            commands::cmd_eval(&cfg, &args.out)
        }
        Command::Sweep(args) => {
            let cfg = resolve_config(&args)?;
            if args.dump_config {
                print!("{}", cfg.to_document());
                return Ok(());
            }
            configure_threads(&cfg)?;
            commands::cmd_sweep(&cfg, &args.out)
        }
        Command::Viz(args) => {
            let cfg = resolve_config(&args)?;
            if args.dump_config {
                print!("{}", cfg.to_document());
                return Ok(());
            }
            configure_threads(&cfg)?;
            commands::cmd_viz(&cfg, &args.out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
    }
}
