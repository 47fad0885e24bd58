//! Quality of every channel prefix, and per-channel importance.

use serde::{Deserialize, Serialize};

use crate::bitstream::serialize_frame;
use crate::error::{contract, Result};
use crate::metrics::{bpp, psnr, spearman};
use crate::model::Codec;
use crate::msssim::{feasible_scales, ms_ssim_per_item};
use crate::quant::{quantize_latent, QuantizedLatent, LATENT_BITS};
use crate::tensor::Tensor;
use crate::Error;

/// Frames decoded per graph.
const DECODE_CHUNK: usize = 16;

/// Mean quality when only the first `channels` latent channels are sent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveRow {
    pub channels: usize,
    pub bpp: f64,
    pub ms_ssim: f64,
    pub psnr: f64,
}

/// Decodes a list of (1, N, h, w) latents in fixed-size batches.
fn decode_all(codec: &Codec, latents: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(DECODE_CHUNK) {
        let batch = codec.decode_batch(&Tensor::stack(chunk)?)?;
        out.extend((0..chunk.len()).map(|i| batch.item(i)));
    }
    Ok(out)
}

fn encode_quantized(codec: &Codec, frames: &[Tensor]) -> Result<Vec<QuantizedLatent>> {
    if frames.is_empty() {
        return Err(contract("evaluation needs at least one frame"));
    }
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(DECODE_CHUNK) {
        let z = codec.encode_batch(&Tensor::stack(chunk)?)?;
        for i in 0..chunk.len() {
            out.push(quantize_latent(&crate::model::Latent::new(z.item(i))?, LATENT_BITS));
        }
    }
    Ok(out)
}

fn scores(frames: &[Tensor], recon: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w) = (frames[0].shape().height(), frames[0].shape().width());
    let scales = feasible_scales(h, w).ok_or(Error::ScaleCount {
        height: h,
        width: w,
        scales: 1,
        needed: crate::msssim::WINDOW,
    })?;
    let mut ssim = Vec::with_capacity(frames.len());
    let mut db = Vec::with_capacity(frames.len());
    for (f, r) in frames.iter().zip(recon) {
        ssim.push(ms_ssim_per_item(f, r, scales)?[0]);
        db.push(psnr(f, r)?);
    }
    Ok((ssim, db))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// For every prefix length `c = 1..=N`: encode, quantize to 5 bits, keep the
/// first `c` channels, zero-fill, decode, and average bpp, MS-SSIM and PSNR
/// over `frames` (each 1×3×H×W, all the same size).
pub fn eval_progressive(codec: &Codec, frames: &[Tensor]) -> Result<Vec<ProgressiveRow>> {
    let quantized = encode_quantized(codec, frames)?;
    let (h, w) = (frames[0].shape().height(), frames[0].shape().width());
    let mut rows = Vec::with_capacity(codec.num_channels());
    for c in 1..=codec.num_channels() {
        let mut latents = Vec::with_capacity(frames.len());
        let mut rates = Vec::with_capacity(frames.len());
        for q in &quantized {
            let prefix = q.truncated(c)?;
            rates.push(bpp(serialize_frame(&prefix)?.len(), w, h));
            latents.push(prefix.dequantize()?.into_tensor());
        }
        let recon = decode_all(codec, &latents)?;
        let (ssim, db) = scores(frames, &recon)?;
        rows.push(ProgressiveRow {
            channels: c,
            bpp: mean(&rates),
            ms_ssim: mean(&ssim),
            psnr: mean(&db),
        });
    }
    Ok(rows)
}

/// Leave-one-out importance of each latent channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelImportance {
    /// Mean MS-SSIM with all channels present.
    pub baseline: f64,
    /// Mean MS-SSIM lost when only channel `i` is zeroed.
    pub damage: Vec<f64>,
    /// Rank correlation between channel index and damage.
    pub spearman: f64,
}

pub fn channel_importance(codec: &Codec, frames: &[Tensor]) -> Result<ChannelImportance> {
    let quantized = encode_quantized(codec, frames)?;
    let full: Vec<Tensor> = quantized
        .iter()
        .map(|q| q.dequantize().map(|z| z.into_tensor()))
        .collect::<Result<_>>()?;
    let baseline = mean(&scores(frames, &decode_all(codec, &full)?)?.0);
    let n = codec.num_channels();
    let mut damage = Vec::with_capacity(n);
    for ch in 0..n {
        let ablated: Vec<Tensor> = full
            .iter()
            .map(|z| {
                let mut z = z.clone();
                z.plane_mut(0, ch).fill(0.0);
                z
            })
            .collect();
        damage.push(baseline - mean(&scores(frames, &decode_all(codec, &ablated)?)?.0));
    }
    let index: Vec<f64> = (0..n).map(|i| i as f64).collect();
    Ok(ChannelImportance {
        baseline,
        spearman: spearman(&index, &damage)?,
        damage,
    })
}
