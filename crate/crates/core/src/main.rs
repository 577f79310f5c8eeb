use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use egomtl::cli::{cmd_eval, cmd_predict, cmd_synth, cmd_train, PredictOptions, RunConfig};
use egomtl::synthdata::Split;
use egomtl::Error;

#[derive(Parser)]
#[command(name = "egomtl", version, about = "Multitask 3D-CNN training on synthetic egocentric clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured task set.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predict coordinates for one MTLC clip.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        emit_heatmaps: bool,
        #[arg(long, value_name = "CLASS")]
        emit_cam: Option<usize>,
    },
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    egomtl::parallel::init_from_env();
    match cli.command {
        Command::Synth { common } => {
            let dir = cmd_synth(&load(&common)?, common.out.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Train { common } => {
            let dir = cmd_train(&load(&common)?, common.out.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Eval { common, checkpoint, split } => {
            let report = cmd_eval(&load(&common)?, &checkpoint, Split::parse(&split)?, common.out.as_deref())?;
            println!("{}", report.to_json()?);
        }
        Command::Predict { common, checkpoint, clip, emit_heatmaps, emit_cam } => {
            let opts = PredictOptions { emit_heatmaps, emit_cam };
            let preds = cmd_predict(&load(&common)?, &checkpoint, &clip, &opts, common.out.as_deref())?;
            println!("{} points", preds.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::NonFinite { .. } => 3,
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
