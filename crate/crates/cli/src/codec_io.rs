use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use progcodec::bitstream::{deserialize_frame, read_video_partial, recover_prefix, serialize_frame, truncate_to_channels, write_video};
use progcodec::metrics::bpp;
use progcodec::ppm::{write_ppm, RgbImage};
use progcodec::quant::{int8_encode, quantize_latent, LATENT_BITS};

use crate::common::{calibrate_from_dir, frame_paths, load_codec, read_frame};
use crate::usage::{require_dir, require_file, require_parent, UsageError};

#[derive(Args)]
pub struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of P6 frames; file-name order is frame order
    #[arg(long)]
    frames: PathBuf,
    /// Channels to keep per frame (defaults to all)
    #[arg(long)]
    channels: Option<usize>,
    /// Output .mcuc sequence
    #[arg(long)]
    out: PathBuf,
    /// Use the integer encoder, calibrated on the input frames
    #[arg(long)]
    int8: bool,
}

pub fn encode(args: EncodeArgs) -> Result<()> {
    let paths = frame_paths(&args.frames)?;
    require_parent(&args.out, "output")?;
    let codec = load_codec(&args.checkpoint)?;
    let n = codec.num_channels();
    let c = args.channels.unwrap_or(n);
    if c == 0 || c > n {
        return Err(UsageError(format!("--channels must be in 1..={n}, got {c}")).into());
    }
    let qenc = if args.int8 {
        Some(calibrate_from_dir(&codec, &args.frames)?)
    } else {
        None
    };
    let mut frames = Vec::with_capacity(paths.len());
    let mut pixels = 0usize;
    for path in &paths {
        let frame = read_frame(path)?;
        let z = match &qenc {
            Some(q) => int8_encode(&frame, q),
            None => codec.encode(&frame),
        }
        .with_context(|| format!("encoding {}", path.display()))?;
        let q = quantize_latent(&z, LATENT_BITS).truncated(c)?;
        frames.push(serialize_frame(&q)?);
        pixels += frame.shape().height() * frame.shape().width();
    }
    let bytes = write_video(&frames);
    std::fs::write(&args.out, &bytes).with_context(|| format!("writing {}", args.out.display()))?;
    let payload: usize = frames.iter().map(Vec::len).sum();
    println!(
        "{} frames, {} bytes ({} in frames), mean {:.4} bpp",
        frames.len(),
        bytes.len(),
        payload,
        bpp(payload, pixels, 1)
    );
    Ok(())
}

#[derive(Args)]
pub struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// .mcuc sequence to decode
    #[arg(long)]
    input: PathBuf,
    /// Directory for decoded frames (frame_00000.ppm, ...)
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn decode(args: DecodeArgs) -> Result<()> {
    require_file(&args.input, "input")?;
    require_dir(&args.out_dir, "output directory")?;
    let codec = load_codec(&args.checkpoint)?;
    let bytes = std::fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let (frames, cut) = read_video_partial(&bytes).with_context(|| format!("reading {}", args.input.display()))?;
    let last = frames.len().saturating_sub(1);
    for (i, frame) in frames.iter().enumerate() {
        let repaired;
        let data: &[u8] = if cut && i == last {
            repaired = recover_prefix(frame).with_context(|| format!("frame {i} of {}", args.input.display()))?;
            &repaired
        } else {
            frame
        };
        let (q, header) = deserialize_frame(data).with_context(|| format!("frame {i} of {}", args.input.display()))?;
        if header.channels as usize != codec.num_channels() {
            anyhow::bail!(
                "frame {i} has {} latent channels but the checkpoint model has {}",
                header.channels,
                codec.num_channels()
            );
        }
        let recon = codec.decode(&q.dequantize()?)?;
        let path = args.out_dir.join(format!("frame_{i:05}.ppm"));
        write_ppm(&path, &RgbImage::from_tensor(&recon, 0)?)?;
        if cut && i == last {
            log::warn!("frame {i} was cut short; decoded its first {} channels", header.present);
        }
    }
    println!("decoded {} frames into {}", frames.len(), args.out_dir.display());
    Ok(())
}

#[derive(Args)]
pub struct TruncateArgs {
    /// .mcuc sequence to cut
    #[arg(long)]
    input: PathBuf,
    /// Channels to keep in every frame
    #[arg(long)]
    channels: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn truncate(args: TruncateArgs) -> Result<()> {
    require_file(&args.input, "input")?;
    require_parent(&args.out, "output")?;
    let bytes = std::fs::read(&args.input)?;
    let frames = progcodec::bitstream::read_video(&bytes)?;
    let cut = frames
        .iter()
        .enumerate()
        .map(|(i, f)| truncate_to_channels(f, args.channels).with_context(|| format!("frame {i}")))
        .collect::<Result<Vec<_>>>()?;
    std::fs::write(&args.out, write_video(&cut))?;
    Ok(())
}
