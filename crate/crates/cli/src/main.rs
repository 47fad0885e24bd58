use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod bdrate;
mod codec_io;
mod common;
mod eval;
mod simulate;
mod train;
mod usage;

use usage::UsageError;

#[derive(Parser)]
#[command(name = "progcodec", version, about = "Progressive neural frame codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec on a directory of PPM images
    Train(train::TrainArgs),
    /// Encode a directory of frames into a .mcuc sequence
    Encode(codec_io::EncodeArgs),
    /// Decode a .mcuc sequence into PPM frames
    Decode(codec_io::DecodeArgs),
    /// Keep only the first channels of every frame in a .mcuc sequence
    Truncate(codec_io::TruncateArgs),
    /// Stream frames through a bandwidth trace and score what arrives
    Simulate(simulate::SimulateArgs),
    /// Rate-distortion curve over every channel count
    Eval(eval::EvalArgs),
    /// Bjontegaard delta rate between two RD curves
    Bdrate(bdrate::BdrateArgs),
}

fn configure_threads() -> Result<(), UsageError> {
    let Ok(value) = std::env::var("PROGCODEC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| UsageError(format!("PROGCODEC_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| UsageError(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = configure_threads().map_err(anyhow::Error::from).and_then(|()| match cli.command {
        Command::Train(args) => train::run(args),
        Command::Encode(args) => codec_io::encode(args),
        Command::Decode(args) => codec_io::decode(args),
        Command::Truncate(args) => codec_io::truncate(args),
        Command::Simulate(args) => simulate::run(args),
        Command::Eval(args) => eval::run(args),
        Command::Bdrate(args) => bdrate::run(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
