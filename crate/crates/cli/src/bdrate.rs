use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use progcodec::metrics::{bd_rate, RdCurve};
use serde_json::json;

use crate::common::write_json;
use crate::usage::{require_file, require_parent, UsageError};

#[derive(Args)]
pub struct BdrateArgs {
    /// Reference RD curve JSON
    anchor: PathBuf,
    /// RD curve JSON to compare against the anchor
    test: PathBuf,
    /// Also write the report as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_curve(path: &Path) -> Result<RdCurve> {
    require_file(path, "RD curve")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RdCurve::from_json(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

pub fn run(args: BdrateArgs) -> Result<()> {
    if let Some(out) = &args.out {
        require_parent(out, "output")?;
    }
    let anchor = load_curve(&args.anchor)?;
    let test = load_curve(&args.test)?;
    if anchor.metric != test.metric {
        return Err(UsageError(format!(
            "{} uses {:?} but {} uses {:?}",
            args.anchor.display(),
            anchor.metric,
            args.test.display(),
            test.metric
        ))
        .into());
    }
    let rate = bd_rate(&anchor, &test)?;
    println!("BD-rate: {rate:+.3}%");
    if let Some(out) = &args.out {
        write_json(
            out,
            &json!({
                "anchor": args.anchor.display().to_string(),
                "test": args.test.display().to_string(),
                "metric": anchor.metric,
                "bd_rate_percent": rate,
            }),
        )?;
    }
    Ok(())
}
