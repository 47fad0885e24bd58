use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use progcodec::model::Codec;
use progcodec::ppm::{list_ppm, read_ppm};
use progcodec::quant::{calibrate_encoder, QuantizedEncoder};
use progcodec::trainer::Checkpoint;
use progcodec::Tensor;

use crate::usage::{require_dir, require_file, UsageError};

pub fn load_codec(path: &Path) -> Result<Codec> {
    require_file(path, "checkpoint")?;
    let ck = Checkpoint::load(path)?;
    Ok(ck.codec()?)
}

/// Sorted PPM paths in `dir`; an empty directory is a usage error.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    require_dir(dir, "frames directory")?;
    let paths = list_ppm(dir)?;
    if paths.is_empty() {
        return Err(UsageError(format!("no .ppm files in {}", dir.display())).into());
    }
    Ok(paths)
}

pub fn read_frame(path: &Path) -> Result<Tensor> {
    Ok(read_ppm(path)?.to_tensor())
}

pub fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Integer encoder calibrated on every frame in `dir`.
pub fn calibrate_from_dir(codec: &Codec, dir: &Path) -> Result<QuantizedEncoder> {
    let frames = frame_paths(dir)?
        .iter()
        .map(|p| read_frame(p))
        .collect::<Result<Vec<_>>>()?;
    calibrate_encoder(codec, &frames).with_context(|| format!("calibrating the int8 encoder on {}", dir.display()))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
