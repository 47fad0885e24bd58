use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use progcodec::streamer::{simulate_session, BandwidthTrace, SessionFrame};

use crate::common::{calibrate_from_dir, file_name, frame_paths, load_codec, read_frame, write_json};
use crate::usage::{require_file, require_parent, UsageError};

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of P6 frames; file-name order is frame order
    #[arg(long)]
    frames: PathBuf,
    /// Bandwidth trace: one `bits <int>` or `kbps <real>` sample per line
    #[arg(long)]
    trace: PathBuf,
    /// Frame rate used to convert kbps samples into per-frame budgets
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Session statistics JSON
    #[arg(long)]
    out: PathBuf,
    /// Use the integer encoder, calibrated on the input frames
    #[arg(long)]
    int8: bool,
}

pub fn run(args: SimulateArgs) -> Result<()> {
    require_file(&args.trace, "trace")?;
    require_parent(&args.out, "output")?;
    let paths = frame_paths(&args.frames)?;
    if !(args.fps.is_finite() && args.fps > 0.0) {
        return Err(UsageError(format!("--fps must be positive, got {}", args.fps)).into());
    }
    let text = std::fs::read_to_string(&args.trace).with_context(|| format!("reading {}", args.trace.display()))?;
    let trace = BandwidthTrace::parse(&text, args.fps).with_context(|| format!("parsing {}", args.trace.display()))?;
    let codec = load_codec(&args.checkpoint)?;
    let qenc = if args.int8 {
        Some(calibrate_from_dir(&codec, &args.frames)?)
    } else {
        None
    };
    let frames: Vec<SessionFrame> = paths
        .iter()
        .map(|p| SessionFrame {
            name: file_name(p),
            image: read_frame(p).map_err(|e| format!("{e:#}")),
        })
        .collect();
    let stats = simulate_session(&frames, &trace, &codec, qenc.as_ref())?;
    write_json(&args.out, &stats)?;
    let s = &stats.summary;
    println!(
        "{} frames, {} dropped, {} errors, mean {:.4} bpp, mean MS-SSIM {}",
        s.frames,
        s.dropped,
        s.errors,
        s.mean_bpp,
        s.mean_ms_ssim.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
    );
    Ok(())
}
