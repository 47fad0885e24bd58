use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use progcodec::metrics::{Metric, RdCurve, RdPoint};
use progcodec::trainer::{channel_importance, eval_progressive};
use serde_json::json;

use crate::common::{frame_paths, load_codec, read_frame, write_json};
use crate::usage::{require_parent, UsageError};

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    MsSsim,
    Psnr,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of same-sized P6 frames
    #[arg(long)]
    eval_dir: PathBuf,
    /// RD curve JSON, one point per channel count
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "ms-ssim")]
    metric: MetricArg,
    /// Also write the full per-channel-count table and leave-one-out channel importance here
    #[arg(long)]
    report: Option<PathBuf>,
}

pub fn run(args: EvalArgs) -> Result<()> {
    require_parent(&args.out, "output")?;
    if let Some(r) = &args.report {
        require_parent(r, "report")?;
    }
    let paths = frame_paths(&args.eval_dir)?;
    let codec = load_codec(&args.checkpoint)?;
    let frames = paths.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>>>()?;
    let dims = frames[0].shape();
    if let Some((p, f)) = paths.iter().zip(&frames).find(|(_, f)| f.shape() != dims) {
        return Err(UsageError(format!(
            "{} is {}x{} but the first frame is {}x{}",
            p.display(),
            f.shape().width(),
            f.shape().height(),
            dims.width(),
            dims.height()
        ))
        .into());
    }
    let table = eval_progressive(&codec, &frames)?;
    let metric = match args.metric {
        MetricArg::MsSsim => Metric::MsSsim,
        MetricArg::Psnr => Metric::Psnr,
    };
    let points = table
        .iter()
        .map(|row| RdPoint {
            bpp: row.bpp,
            d: match metric {
                Metric::MsSsim => row.ms_ssim,
                Metric::Psnr => row.psnr,
            },
        })
        .collect();
    write_json(&args.out, &RdCurve::new(metric, points)?)?;
    println!("{:>8} {:>8} {:>8} {:>8}", "channels", "bpp", "ms-ssim", "psnr");
    for row in &table {
        println!("{:>8} {:>8.4} {:>8.4} {:>8.2}", row.channels, row.bpp, row.ms_ssim, row.psnr);
    }
    if let Some(path) = &args.report {
        let importance = channel_importance(&codec, &frames)?;
        println!("channel importance spearman {:.3}", importance.spearman);
        write_json(
            path,
            &json!({
                "frames": frames.len(),
                "progressive": table,
                "importance": importance,
            }),
        )?;
    }
    Ok(())
}
