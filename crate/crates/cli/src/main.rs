//! `textrec`: train, run and inspect the recogniser from the shell.
//!
//! Exit status is 0 on success, 2 for usage, configuration or input errors,
//! and 3 for failures during computation.

mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use textrec_core::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "textrec", version, about = "Scene text recognition at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a CSV log.
    Train(TrainArgs),
    /// Decode one image and print the text.
    Recognize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = textrec_core::recognizer::DEFAULT_BEAM)]
        beam: usize,
    },
    /// Write deformed copies of a manifest's images.
    Augment(AugmentArgs),
    /// Write per-step visual attention heatmaps and the semantic affinity matrix.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print sequence accuracy on a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = textrec_core::recognizer::DEFAULT_BEAM)]
        beam: usize,
        /// Also print `expected<TAB>predicted` for every miss.
        #[arg(long)]
        verbose: bool,
    },
    /// Accuracy on a raw manifest and on every deformation level of a ladder.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        raw: PathBuf,
        /// Directory produced by `augment --ladder`.
        #[arg(long)]
        ladder: PathBuf,
        #[arg(long, default_value_t = textrec_core::recognizer::DEFAULT_BEAM)]
        beam: usize,
    },
    /// Train every variant of a grid and write a comparison CSV.
    Ablate(AblateArgs),
    /// Write the synthetic corpus as PGM images plus a manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seeds both initialisation and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Append a constant-rate phase after the schedule (two epochs unless
    /// `train.finetune_steps` is set).
    #[arg(long)]
    pub finetune: bool,
    /// CSV log path; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, required_unless_present = "ladder")]
    pub mode: Option<String>,
    #[arg(long, required_unless_present = "ladder")]
    pub intensity: Option<u32>,
    #[arg(long, default_value_t = textrec_augment::dataset::DEFAULT_FIDUCIALS)]
    pub n_fiducial: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Build all twelve sets `ha1`..`ha6`, `ca1`..`ca6` under `--out`.
    #[arg(long, conflicts_with_all = ["mode", "intensity"])]
    pub ladder: bool,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Grid file; the built-in grid is used when omitted.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training steps per variant.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Write the built-in grid to this path and exit.
    #[arg(long)]
    pub write_grid: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::State(_) | Error::Shape { .. } | Error::Contract(_) => EXIT_RUNTIME,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Recognize { ckpt, image, beam } => commands::recognize(&ckpt, &image, beam),
        Command::Augment(a) => commands::augment(&a),
        Command::ExportAttention { ckpt, image, out } => commands::export_attention(&ckpt, &image, &out),
        Command::Eval {
            ckpt,
            data,
            beam,
            verbose,
        } => commands::eval(&ckpt, &data, beam, verbose),
        Command::Sweep {
            ckpt,
            raw,
            ladder,
            beam,
        } => commands::sweep(&ckpt, &raw, &ladder, beam),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Synth { config, out } => commands::synth(config.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("textrec: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
