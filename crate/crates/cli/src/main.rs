//! Command-line runner: dataset synthesis, training, evaluation, and
//! ablation sweeps, all driven by one JSON run config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::eval::{parse_fractions, parse_modality, EvalArgs};

#[derive(Parser)]
#[command(name = "mlpc", version, about = "Prototype-based multi-label contrastive learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic two-modality dataset.
    Synth {
        /// Run config (JSON); the synth section applies.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (holds manifest.json).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split to score (default: test).
        #[arg(long, default_value = "test")]
        split: String,
        /// Run the robustness sweep dropping this modality ("v" or "t").
        #[arg(long)]
        drop_modality: Option<String>,
        /// Comma-separated drop fractions for the sweep.
        #[arg(long, default_value = "0.0,0.25,0.5,0.75,1.0")]
        fractions: String,
        /// Comma-separated precision floors for recall-at-precision.
        #[arg(long, default_value = "0.8")]
        precision_floors: String,
    },
    /// Run a grid of training runs and summarize.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid axes: losses=..., protos=..., fusion_layers=..., seeds=N.
        #[arg(long, num_args = 1.., value_name = "AXIS=V1,V2")]
        grid: Vec<String>,
    },
}

fn dispatch(cmd: Cmd) -> mlpc_core::Result<()> {
    match cmd {
        Cmd::Synth { config, out } => commands::synth::run(&config, &out),
        Cmd::Train { config, data, out, resume } => {
            commands::train::run(&config, &data, &out, resume.as_deref())
        }
        Cmd::Eval { ckpt, data, out, split, drop_modality, fractions, precision_floors } => {
            let drop = drop_modality.as_deref().map(parse_modality).transpose()?;
            let args = EvalArgs {
                ckpt: &ckpt,
                data: &data,
                out: &out,
                split: &split,
                drop_modality: drop,
                fractions: parse_fractions(&fractions)?,
                precision_floors: parse_fractions(&precision_floors)?,
            };
            commands::eval::run(&args)
        }
        Cmd::Ablate { config, data, out, grid } => {
            commands::ablate::run(&config, &data, &grid, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
