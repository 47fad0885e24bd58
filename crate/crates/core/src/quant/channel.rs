//! Per-channel affine quantization of latent channels to a few bits.
//!
//! The quantization range is the channel's observed `[min, max]` widened to
//! contain zero, so zero is exactly representable and every value inside the
//! range lands within half a step of its code.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::Latent;
use crate::tensor::{Shape, Tensor};

/// Bit width of transmitted latent codes.
pub const LATENT_BITS: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelQuantParams {
    /// Step size as sent on the wire, rounded up to binary32 so the codes
    /// still span the calibrated range.
    pub scale: f32,
    pub zero_point: u8,
    pub bits: u8,
}

impl ChannelQuantParams {
    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }

    /// Calibrates on `values`. An all-zero (degenerate) range gives scale 1,
    /// zero point 0.
    pub fn calibrate(values: &[f64], bits: u8) -> Self {
        assert!((1..=8).contains(&bits), "bit width {bits} outside 1..=8");
        let qmax = ((1u16 << bits) - 1) as f64;
        let lo = values.iter().copied().fold(0.0f64, f64::min);
        let hi = values.iter().copied().fold(0.0f64, f64::max);
        if hi <= lo {
            return ChannelQuantParams {
                scale: 1.0,
                zero_point: 0,
                bits,
            };
        }
        let exact = (hi - lo) / qmax;
        let mut scale = (exact as f32).max(f32::MIN_POSITIVE);
        if (scale as f64) < exact {
            scale = scale.next_up();
        }
        let zero_point = (-lo / scale as f64).round().clamp(0.0, qmax) as u8;
        ChannelQuantParams { scale, zero_point, bits }
    }

    pub fn quantize(&self, x: f64) -> u8 {
        let qmax = self.max_code() as f64;
        ((x / self.scale as f64).round() + self.zero_point as f64).clamp(0.0, qmax) as u8
    }

    pub fn dequantize(&self, code: u8) -> f64 {
        (code as f64 - self.zero_point as f64) * self.scale as f64
    }
}

/// Quantizes one channel over its own range.
pub fn quantize_channel(channel: &[f64], bits: u8) -> (Vec<u8>, ChannelQuantParams) {
    let params = ChannelQuantParams::calibrate(channel, bits);
    (quantize_with(channel, &params), params)
}

pub fn quantize_with(channel: &[f64], params: &ChannelQuantParams) -> Vec<u8> {
    channel.iter().map(|&x| params.quantize(x)).collect()
}

/// Inverse mapping; codes above the bit width are a corrupt stream.
pub fn dequantize_channel(codes: &[u8], params: &ChannelQuantParams) -> Result<Vec<f64>> {
    let max = params.max_code();
    if let Some(pos) = codes.iter().position(|&c| c > max) {
        return Err(Error::Corrupt(format!(
            "code {} at index {pos} exceeds {}-bit range",
            codes[pos], params.bits
        )));
    }
    Ok(codes.iter().map(|&c| params.dequantize(c)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedChannel {
    pub codes: Vec<u8>,
    pub params: ChannelQuantParams,
}

/// The transmitted form of a latent: the first `c` channels in significance
/// order, each with its own quantization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLatent {
    /// Latent spatial size (frame size / 8).
    pub height: usize,
    pub width: usize,
    /// Channel count of the full latent.
    pub total_channels: usize,
    pub channels: Vec<QuantizedChannel>,
}

impl QuantizedLatent {
    pub fn present(&self) -> usize {
        self.channels.len()
    }

    /// Keeps the first `c` channels.
    pub fn truncated(&self, c: usize) -> Result<QuantizedLatent> {
        if c == 0 || c > self.present() {
            return Err(contract(format!("cannot keep {c} of {} channels", self.present())));
        }
        Ok(QuantizedLatent {
            channels: self.channels[..c].to_vec(),
            ..self.clone()
        })
    }

    /// Dequantizes the present channels and zero-fills the rest.
    pub fn dequantize(&self) -> Result<Latent> {
        if self.present() == 0 {
            return Err(Error::EmptyPrefix);
        }
        let p = self.height * self.width;
        let mut data = Vec::with_capacity(self.total_channels * p);
        for ch in &self.channels {
            if ch.codes.len() != p {
                return Err(Error::Corrupt(format!("channel holds {} codes, expected {p}", ch.codes.len())));
            }
            data.extend(dequantize_channel(&ch.codes, &ch.params)?);
        }
        data.resize(self.total_channels * p, 0.0);
        Latent::new(Tensor::new(Shape::new(1, self.total_channels, self.height, self.width), data)?)
    }
}

/// Quantizes every channel of `z` to `bits` bits.
pub fn quantize_latent(z: &Latent, bits: u8) -> QuantizedLatent {
    let channels = (0..z.channels())
        .map(|c| {
            let (codes, params) = quantize_channel(z.channel(c), bits);
            QuantizedChannel { codes, params }
        })
        .collect();
    QuantizedLatent {
        height: z.height(),
        width: z.width(),
        total_channels: z.channels(),
        channels,
    }
}
