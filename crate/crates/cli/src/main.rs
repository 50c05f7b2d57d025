//! `bcgan`: dataset generation, pre-training, BC-GAN training, generation,
//! evaluation, interpolation and reporting over one run directory.

mod commands;
mod config;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use bcgan::trainer::Ablations;
use bcgan::Error;
use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::run::Run;

#[derive(Debug, Parser)]
#[command(name = "bcgan", version, about = "Synthesis of collocated clothing with a batch-conditioned GAN")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any configuration key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate (or ingest) the dataset and its train/test split.
    Dataset,
    /// Pre-train the target-domain generator.
    Pretrain {
        /// Shorthand for `--set pretrain_iterations=N`.
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        resume: bool,
    },
    /// Train the encoder adversarially against the pre-trained generator.
    Train {
        /// Shorthand for `--set iterations=N`.
        #[arg(long)]
        iterations: Option<u64>,
        /// no-div, no-dcmp, no-contrastive or pixel; repeatable.
        #[arg(long, value_name = "NAME")]
        ablate: Vec<String>,
        #[arg(long)]
        resume: bool,
    },
    /// Synthesise `n` items for each input image and a comparison grid.
    Generate {
        /// PNG file or directory of PNG files from the given domain.
        #[arg(long)]
        input: PathBuf,
        #[arg(short, long, default_value_t = 10)]
        n: usize,
        #[arg(long, value_name = "NAME")]
        ablate: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a trained model on the test split; `--compare` adds F²BT.
    Evaluate {
        #[arg(long, value_name = "NAME")]
        ablate: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Another trained checkpoint to rank against; repeatable.
        #[arg(long, value_name = "NAME=PATH")]
        compare: Vec<String>,
    },
    /// Morph between the random and the encoded style embedding.
    Interpolate {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated mixing ratios, e.g. `0,0.25,0.5,0.75,1`.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long, value_name = "NAME")]
        ablate: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Plot training curves and collect results.
    Report,
}

fn resolve(cli: &Cli) -> Result<RunConfig, Error> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let ablate: &[String] = match &cli.command {
        Command::Pretrain { iterations: Some(n), .. } => {
            overrides.push(format!("pretrain_iterations={n}"));
            &[]
        }
        Command::Train { iterations, ablate, .. } => {
            if let Some(n) = iterations {
                overrides.push(format!("iterations={n}"));
            }
            ablate
        }
        Command::Generate { ablate, .. } | Command::Evaluate { ablate, .. } | Command::Interpolate { ablate, .. } => ablate,
        _ => &[],
    };
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if !ablate.is_empty() {
        let mut ab: Ablations = cfg.ablations();
        for name in ablate {
            ab.apply(name)?;
        }
        cfg.set_ablations(ab);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let run = Run::open(cfg)?;
    match &cli.command {
        Command::Dataset => commands::dataset(&run),
        Command::Pretrain { resume, .. } => commands::pretrain(&run, *resume),
        Command::Train { resume, .. } => commands::train(&run, *resume),
        Command::Generate { input, n, checkpoint, .. } => commands::generate(&run, input, *n, checkpoint.as_deref()),
        Command::Evaluate { checkpoint, compare, .. } => commands::evaluate(&run, checkpoint.as_deref(), compare),
        Command::Interpolate { input, schedule, checkpoint, .. } => {
            commands::interpolate(&run, input, schedule.as_deref(), checkpoint.as_deref())
        }
        Command::Report => commands::report(&run),
    }
}

/// 2 configuration, 3 data, 4 numeric divergence, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::InvalidArgument(_) | Error::DigestMismatch { .. }) => 2,
        Some(Error::Divergence { .. }) => 4,
        Some(
            Error::Data(_)
            | Error::Manifest(_)
            | Error::Infeasible(_)
            | Error::MissingAttributes(_)
            | Error::DomainMismatch { .. }
            | Error::ResolutionMismatch(..)
            | Error::DimensionMismatch { .. }
            | Error::CorruptCheckpoint(_)
            | Error::CheckpointVersion { .. }
            | Error::Image { .. }
            | Error::Io { .. },
        ) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
