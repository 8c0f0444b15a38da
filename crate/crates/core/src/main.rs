//! `fgc`: extraction, corpus simulation, training, generation, editing and evaluation.

mod cli;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cli::{CliError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "fgc", version, about = "Fine-grained controllable text-to-audio generation at desk scale")]
pub struct Cli {
    /// TOML config file; explicit flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random choice of the run [default: config seed, else 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureKind {
    Loudness,
    Pitch,
    Events,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainTarget {
    Backbone,
    Loudness,
    Pitch,
    Events,
    Insert,
    Remove,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Adapter,
    Controlnet,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract a condition from a WAV file (loudness, pitch) or an event roll JSON (events).
    Extract {
        #[arg(long, value_enum)]
        kind: FeatureKind,
        /// Input WAV, or event-roll JSON for `--kind events`.
        input: PathBuf,
        /// Checkpoint whose pitch quantizer range to use [default: fit on the input].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a synthetic tone corpus with event rolls, captions and edit pairs.
    Simulate {
        /// Number of clips [default: 512].
        #[arg(long)]
        clips: Option<usize>,
        /// Number of edit pairs, alternating insert and remove.
        #[arg(long, default_value_t = 64)]
        pairs: usize,
        /// Clip length in seconds [default: 3.0].
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Train the backbone, a control branch or an editor; writes a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        target: TrainTarget,
        /// Starting checkpoint; required for branch and editor training.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Branch architecture for loudness, pitch and events.
        #[arg(long, value_enum, default_value = "adapter")]
        arch: Arch,
        /// Give the editor LoRA deltas on the backbone attention [rank from config, default 64].
        #[arg(long)]
        lora: bool,
        /// Branch name [default: the target name].
        #[arg(long)]
        branch: Option<String>,
        /// Optimiser steps [default: 1000].
        #[arg(long)]
        steps: Option<usize>,
        /// AdamW learning rate [default: 1e-4].
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Joint caption/condition drop probability [default: 0.1].
        #[arg(long)]
        cfg_drop: Option<f64>,
        /// Output checkpoint path [default: OUT_DIR/model.fgc].
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON-lines step log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sample audio from a checkpoint; writes gen.wav and gen_latent.fgc1.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated caption labels, e.g. "dog,siren".
        #[arg(long, default_value = "")]
        text: String,
        /// BRANCH=FILE; loudness takes a WAV or loudness.fgc1, pitch a WAV or
        /// pitch.fgc1, events a roll JSON or events.fgc1. Repeat to compose.
        #[arg(long = "condition")]
        conditions: Vec<String>,
        /// Euler steps [default: 25].
        #[arg(long)]
        steps: Option<usize>,
        /// Classifier-free guidance scale [default: 4.5].
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Clip length in seconds [default: 3.0].
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Edit a WAV with an instruction "action: label: start: end".
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// e.g. "insert: clap: 2.0: 2.5".
        #[arg(long)]
        spec: String,
        /// Editor branch [default: the one named after the action, else the only editor].
        #[arg(long)]
        branch: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Score generated clips against a reference corpus; writes eval_report.json and .csv.
    Eval {
        /// Corpus directory (from `simulate`) with reference clips and rolls.
        #[arg(long)]
        reference: PathBuf,
        /// Directory of generated `<clip id>.wav` files.
        #[arg(long)]
        generated: PathBuf,
        /// Event-matching collar in seconds [default: 0.2].
        #[arg(long)]
        collar: Option<f64>,
        /// Segment length in seconds [default: 1.0].
        #[arg(long)]
        segment: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    cli::check_threads()?;
    let config = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| CliError::bad_input(format!("{}: {e}", cli.out_dir.display())))?;
    cli::dispatch(cli, config)
}
