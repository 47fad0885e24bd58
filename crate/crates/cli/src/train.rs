use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use progcodec::model::ModelConfig;
use progcodec::ppm::resize_area;
use progcodec::trainer::{eval_progressive, load_eval_frames, Checkpoint, Dataset, ProgressiveRow, TrainConfig, Trainer};
use progcodec::Tensor;
use serde_json::json;

use crate::usage::{require_dir, require_file, require_parent, UsageError};

#[derive(Args)]
pub struct TrainArgs {
    /// Directory of training images (*.ppm)
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written at every interval and at the end
    #[arg(long)]
    out: PathBuf,
    /// Laptop-sized recipe: 48x48 crops, decoder width 32
    #[arg(long)]
    desk: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    /// First iteration trained at the final learning rate
    #[arg(long)]
    lr_drop_at: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Images for the per-interval quality table (defaults to training images)
    #[arg(long)]
    eval_dir: Option<PathBuf>,
    /// How many images the per-interval table averages over
    #[arg(long, default_value_t = 32)]
    log_eval_images: usize,
    /// JSON training log (defaults to <out>.log.json)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl TrainArgs {
    fn configs(&self) -> Result<(TrainConfig, ModelConfig), UsageError> {
        let (mut cfg, model) = if self.desk {
            (TrainConfig::desk_scale(), ModelConfig::desk_scale())
        } else {
            (TrainConfig::full_scale(), ModelConfig::full_scale())
        };
        cfg.seed = self.seed;
        if let Some(v) = self.iterations {
            cfg.iterations = v;
            if self.lr_drop_at.is_none() {
                cfg.lr_drop_at = v - v / 20;
            }
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
            if self.lr_final.is_none() {
                cfg.lr_final = v / 10.0;
            }
        }
        if let Some(v) = self.lr_final {
            cfg.lr_final = v;
        }
        if let Some(v) = self.lr_drop_at {
            cfg.lr_drop_at = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        model.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok((cfg, model))
    }
}

pub fn run(args: TrainArgs) -> Result<()> {
    require_dir(&args.data, "dataset")?;
    require_parent(&args.out, "checkpoint")?;
    if let Some(dir) = &args.eval_dir {
        require_dir(dir, "eval directory")?;
    }
    if let Some(ck) = &args.resume {
        require_file(ck, "checkpoint")?;
    }
    let (cfg, model) = args.configs()?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log.json");
        PathBuf::from(p)
    });
    require_parent(&log_path, "log")?;

    let dataset = Dataset::load(&args.data, cfg.resize_side(), cfg.crop_size)?;
    log::info!("{} training images ({} skipped as too small)", dataset.len(), dataset.skipped.len());
    let (h, w) = model.input_size;
    let eval_frames: Vec<Tensor> = match &args.eval_dir {
        Some(dir) => load_eval_frames(dir, h, w)?,
        None => dataset.images.iter().map(|img| resize_area(&img.to_tensor(), h, w)).collect(),
    };
    let eval_frames: Vec<Tensor> = eval_frames.into_iter().take(args.log_eval_images.max(1)).collect();

    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model != model {
                return Err(UsageError(format!("{} was trained with a different model config", path.display())).into());
            }
            Trainer::resume(ck, Some(cfg.clone()), dataset.clone())?
        }
        None => Trainer::new(cfg.clone(), model.clone(), dataset.clone())?,
    };
    trainer.set_dump_dir(args.out.with_extension("nonfinite"));

    let mut intervals = Vec::new();
    let started = Instant::now();
    let out = args.out.clone();
    let write_log = |intervals: &Vec<serde_json::Value>| -> Result<()> {
        let log = json!({
            "model": model,
            "train": cfg,
            "dataset": {
                "dir": args.data.display().to_string(),
                "images": dataset.len(),
                "skipped": dataset.skipped.len(),
            },
            "eval_images": eval_frames.len(),
            "intervals": intervals,
        });
        std::fs::write(&log_path, serde_json::to_vec_pretty(&log)?).with_context(|| format!("writing {}", log_path.display()))
    };
    trainer.run(|t, stats| {
        let table: Vec<ProgressiveRow> = eval_progressive(t.codec(), &eval_frames)?;
        log::info!(
            "iteration {}: loss {:.5}, MS-SSIM c=1 {:.4} c={} {:.4}, {:.0}s elapsed",
            stats.iteration,
            stats.mean_loss,
            table[0].ms_ssim,
            table.len(),
            table[table.len() - 1].ms_ssim,
            started.elapsed().as_secs_f64()
        );
        t.checkpoint().save(&out)?;
        intervals.push(json!({
            "iteration": stats.iteration,
            "mean_loss": stats.mean_loss,
            "lr": stats.lr,
            "elapsed_seconds": started.elapsed().as_secs_f64(),
            "progressive": table,
        }));
        write_log(&intervals).map_err(|e| progcodec::Error::File {
            path: log_path.clone(),
            detail: e.to_string(),
        })
    })?;
    if intervals.is_empty() {
        trainer.checkpoint().save(&out)?;
        write_log(&intervals)?;
    }
    println!(
        "trained to iteration {} in {:.1}s; checkpoint {}",
        trainer.iteration(),
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}
