//! Bandwidth-gated transmission and the trace-driven session simulator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitstream::{deserialize_frame, frame_size, serialize_frame, truncate_to_channels};
use crate::error::{contract, Error, Result};
use crate::metrics::{bpp, ms_ssim_eval, psnr};
use crate::model::Codec;
use crate::quant::{int8_encode, quantize_latent, QuantizedEncoder, LATENT_BITS};
use crate::tensor::Tensor;

/// Per-frame bit budgets; frame `i` gets `budgets[i % len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandwidthTrace {
    budgets: Vec<u64>,
}

impl BandwidthTrace {
    pub fn from_budgets(budgets: Vec<u64>) -> Result<Self> {
        if budgets.is_empty() {
            return Err(contract("bandwidth trace needs at least one sample"));
        }
        Ok(BandwidthTrace { budgets })
    }

    pub fn constant(bits: u64) -> Self {
        BandwidthTrace { budgets: vec![bits] }
    }

    /// Parses the text trace format: one sample per line, `bits <int>` or
    /// `kbps <real>`, `#` starts a comment. A kbps sample becomes
    /// `⌊kbps · 1000 / fps⌋` bits.
    pub fn parse(text: &str, fps: f64) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(contract(format!("frame rate {fps} must be positive")));
        }
        let mut budgets = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::Format(format!("trace line {}: {why}: {raw:?}", i + 1));
            let mut parts = line.split_whitespace();
            let (unit, value) = match (parts.next(), parts.next(), parts.next()) {
                (Some(u), Some(v), None) => (u, v),
                _ => return Err(bad("expected `bits <int>` or `kbps <real>`")),
            };
            let bits = match unit {
                "bits" => value.parse::<u64>().map_err(|_| bad("bits must be a non-negative integer"))?,
                "kbps" => {
                    let kbps: f64 = value.parse().map_err(|_| bad("kbps must be a number"))?;
                    if !(kbps.is_finite() && kbps >= 0.0) {
                        return Err(bad("kbps must be finite and non-negative"));
                    }
                    (kbps * 1000.0 / fps).floor() as u64
                }
                _ => return Err(bad("unknown unit")),
            };
            budgets.push(bits);
        }
        if budgets.is_empty() {
            return Err(Error::Format("trace contains no samples".into()));
        }
        Ok(BandwidthTrace { budgets })
    }

    pub fn budget(&self, frame_index: usize) -> u64 {
        self.budgets[frame_index % self.budgets.len()]
    }

    pub fn budgets(&self) -> &[u64] {
        &self.budgets
    }
}

/// Bits needed to send the first `c` channels of a frame (0 for `c = 0`).
pub fn stream_size_bits(width: usize, height: usize, c: usize) -> u64 {
    if c == 0 {
        0
    } else {
        8 * frame_size(width, height, c) as u64
    }
}

/// Largest channel count whose stream fits `budget_bits`; 0 drops the frame.
pub fn gate(budget_bits: u64, width: usize, height: usize, n: usize) -> usize {
    (1..=n)
        .take_while(|&c| stream_size_bits(width, height, c) <= budget_bits)
        .last()
        .unwrap_or(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub frame_index: usize,
    pub budget_bits: u64,
    /// 0 when the frame was dropped.
    pub channels_sent: usize,
    pub bits_used: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub name: String,
    #[serde(flatten)]
    pub decision: GateDecision,
    pub bpp: f64,
    /// Absent for dropped or failed frames.
    pub ms_ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub frames: usize,
    pub dropped: usize,
    pub errors: usize,
    /// Over frames without errors; dropped frames count as 0 bpp.
    pub mean_bpp: f64,
    /// Over delivered frames; absent if none was delivered.
    pub mean_ms_ssim: Option<f64>,
    pub mean_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub frames: Vec<FrameRecord>,
    pub summary: SessionSummary,
}

impl SessionSummary {
    pub fn from_records(records: &[FrameRecord]) -> Self {
        let ok: Vec<&FrameRecord> = records.iter().filter(|r| r.error.is_none()).collect();
        let delivered: Vec<&FrameRecord> = ok.iter().copied().filter(|r| r.decision.channels_sent > 0).collect();
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        SessionSummary {
            frames: records.len(),
            dropped: ok.len() - delivered.len(),
            errors: records.len() - ok.len(),
            mean_bpp: mean(ok.iter().map(|r| r.bpp).collect()).unwrap_or(0.0),
            mean_ms_ssim: mean(delivered.iter().filter_map(|r| r.ms_ssim).collect()),
            mean_psnr: mean(delivered.iter().filter_map(|r| r.psnr).collect()),
        }
    }
}

/// One input frame; `image` carries the load error for unreadable files.
pub struct SessionFrame {
    pub name: String,
    pub image: std::result::Result<Tensor, String>,
}

fn run_frame(
    index: usize,
    frame: &SessionFrame,
    budget: u64,
    codec: &Codec,
    int8: Option<&QuantizedEncoder>,
) -> FrameRecord {
    let mut record = FrameRecord {
        name: frame.name.clone(),
        decision: GateDecision {
            frame_index: index,
            budget_bits: budget,
            channels_sent: 0,
            bits_used: 0,
        },
        bpp: 0.0,
        ms_ssim: None,
        psnr: None,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let image = frame.image.as_ref().map_err(|e| Error::Format(e.clone()))?;
        let (h, w) = (image.shape().height(), image.shape().width());
        let z = match int8 {
            Some(q) => int8_encode(image, q)?,
            None => codec.encode(image)?,
        };
        let full = serialize_frame(&quantize_latent(&z, LATENT_BITS))?;
        let c = gate(budget, w, h, codec.num_channels());
        record.decision.channels_sent = c;
        if c == 0 {
            return Ok(());
        }
        let sent = truncate_to_channels(&full, c)?;
        record.decision.bits_used = 8 * sent.len() as u64;
        record.bpp = bpp(sent.len(), w, h);
        let (received, _) = deserialize_frame(&sent)?;
        let recon = codec.decode(&received.dequantize()?)?;
        record.ms_ssim = Some(ms_ssim_eval(image, &recon)?);
        record.psnr = Some(psnr(image, &recon)?);
        Ok(())
    })();
    if let Err(e) = outcome {
        record.decision.channels_sent = 0;
        record.decision.bits_used = 0;
        record.bpp = 0.0;
        record.error = Some(e.to_string());
    }
    record
}

/// Encodes, gates, truncates, decodes and scores every frame. Frames that
/// cannot be read or coded get an error record and the session continues.
/// `int8` selects the integer encoder instead of the float one.
pub fn simulate_session(
    frames: &[SessionFrame],
    trace: &BandwidthTrace,
    codec: &Codec,
    int8: Option<&QuantizedEncoder>,
) -> Result<SessionStats> {
    if frames.is_empty() {
        return Err(contract("session needs at least one frame"));
    }
    let records: Vec<FrameRecord> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| run_frame(i, f, trace.budget(i), codec, int8))
        .collect();
    Ok(SessionStats {
        summary: SessionSummary::from_records(&records),
        frames: records,
    })
}
