//! `sceneseg`: train, segment and score single-scene unsupervised
//! segmentation models.

mod eval;
mod segment;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sceneseg_core::Error;

/// Exit status for configuration, usage and size errors.
const EXIT_CONFIG: u8 = 2;
/// Exit status when training diverges.
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "sceneseg", version, about = "Unsupervised segmentation of a single remote-sensing scene")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on one scene
    Train(train::TrainArgs),
    /// Segment a scene with a trained model
    Segment(segment::SegmentArgs),
    /// Score cluster maps against reference masks
    Eval(eval::EvalArgs),
}

/// A usage problem that clap cannot express (flag dependencies, counts).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Shape { .. }) => EXIT_CONFIG,
        Some(Error::NonFinite(_)) => EXIT_DIVERGED,
        _ => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("SCENESEG_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Usage(format!("SCENESEG_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Train(args) => train::run(args),
        Command::Segment(args) => segment::run(args),
        Command::Eval(args) => eval::run(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
