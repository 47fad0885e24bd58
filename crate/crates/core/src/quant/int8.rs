//! Post-training 8-bit quantization of the encoder and its integer-only
//! forward pass.
//!
//! Weights are symmetric int8 with one scale per output channel
//! (`max|w| / 127`). Activations are asymmetric int8 with a per-layer scale
//! and zero point taken from the min/max seen on calibration frames. Biases
//! are int32 at `input_scale · weight_scale`. Each layer accumulates in int32
//! and requantizes with a fixed-point multiplier (a Q31 mantissa plus a
//! power-of-two shift), so no floating point touches the accumulation loop.

use rayon::prelude::*;

use crate::autodiff::conv::{conv2d_forward, ConvGeometry};
use crate::error::{contract, Error, Result};
use crate::model::{Codec, Latent};
use crate::tensor::{Shape, Tensor};

/// Calibration needs at least this many frames.
pub const MIN_CALIBRATION_FRAMES: usize = 16;

/// Input pixels map to int8 as `round(255·x) − 128`.
pub const INPUT_SCALE: f64 = 1.0 / 255.0;
pub const INPUT_ZERO_POINT: i32 = -128;

/// Fixed-point representation of a positive real multiplier:
/// `value ≈ mantissa · 2^(shift − 31)` with `mantissa` in `[2^30, 2^31)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedMultiplier {
    pub mantissa: i32,
    pub shift: i32,
}

impl FixedMultiplier {
    pub fn from_real(m: f64) -> Result<Self> {
        if !(m.is_finite() && m > 0.0) {
            return Err(contract(format!("requantization multiplier {m} must be positive and finite")));
        }
        let mut shift = m.log2().floor() as i32 + 1;
        let mut q = (m / 2f64.powi(shift) * (1i64 << 31) as f64).round() as i64;
        if q == 1i64 << 31 {
            q /= 2;
            shift += 1;
        }
        Ok(FixedMultiplier {
            mantissa: q as i32,
            shift,
        })
    }

    /// `round(x · value)` in integer arithmetic.
    pub fn apply(&self, x: i32) -> i32 {
        let prod = x as i64 * self.mantissa as i64;
        let total_shift = 31 - self.shift;
        if total_shift <= 0 {
            return (prod << -total_shift).clamp(i32::MIN as i64, i32::MAX as i64) as i32;
        }
        let round = 1i64 << (total_shift - 1);
        // Round half away from zero, symmetric for negative values.
        let r = if prod >= 0 {
            (prod + round) >> total_shift
        } else {
            -((-prod + round) >> total_shift)
        };
        r.clamp(i32::MIN as i64, i32::MAX as i64) as i32
    }

    pub fn to_real(&self) -> f64 {
        self.mantissa as f64 * 2f64.powi(self.shift - 31)
    }
}

/// Affine int8 activation quantization `real = scale · (q − zero_point)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationQuant {
    pub scale: f64,
    pub zero_point: i32,
}

impl ActivationQuant {
    /// Range widened to include zero so that zero padding and ReLU are exact.
    pub fn from_range(lo: f64, hi: f64) -> Self {
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        if hi - lo <= 0.0 {
            return ActivationQuant {
                scale: 1.0,
                zero_point: 0,
            };
        }
        let scale = (hi - lo) / 255.0;
        let zero_point = (-128.0 - lo / scale).round().clamp(-128.0, 127.0) as i32;
        ActivationQuant { scale, zero_point }
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        self.scale * (q as i32 - self.zero_point) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedConv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// (out, in, k, k) int8 weights.
    pub weights: Vec<i8>,
    pub weight_scales: Vec<f64>,
    pub bias: Vec<i32>,
    pub input: ActivationQuant,
    pub output: ActivationQuant,
    pub multipliers: Vec<FixedMultiplier>,
    pub relu: bool,
}

impl QuantizedConv {
    fn build(weight: &Tensor, bias: &[f64], stride: usize, input: ActivationQuant, output: ActivationQuant, relu: bool) -> Result<Self> {
        let [out_c, in_c, k, _] = weight.shape().0;
        let per_out = in_c * k * k;
        let mut weights = Vec::with_capacity(weight.numel());
        let mut weight_scales = Vec::with_capacity(out_c);
        let mut qbias = Vec::with_capacity(out_c);
        let mut multipliers = Vec::with_capacity(out_c);
        for o in 0..out_c {
            let w = &weight.data()[o * per_out..(o + 1) * per_out];
            let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let s = if max > 0.0 { max / 127.0 } else { 1.0 };
            weights.extend(w.iter().map(|v| (v / s).round().clamp(-127.0, 127.0) as i8));
            let acc_scale = input.scale * s;
            let b = (bias[o] / acc_scale).round();
            if b.abs() > i32::MAX as f64 / 2.0 {
                return Err(contract(format!("bias {} of output channel {o} overflows int32", bias[o])));
            }
            qbias.push(b as i32);
            multipliers.push(FixedMultiplier::from_real(acc_scale / output.scale)?);
            weight_scales.push(s);
        }
        Ok(QuantizedConv {
            in_channels: in_c,
            out_channels: out_c,
            kernel: k,
            stride,
            padding: k / 2,
            weights,
            weight_scales,
            bias: qbias,
            input,
            output,
            multipliers,
            relu,
        })
    }

    fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(
            Shape::new(1, self.in_channels, h, w),
            Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel),
            self.out_channels,
            self.stride,
            self.padding,
        )
    }

    /// Integer convolution of one (C, H, W) int8 activation map.
    fn forward(&self, x: &[i8], h: usize, w: usize) -> Result<(Vec<i8>, usize, usize)> {
        let g = self.geometry(h, w)?;
        let zin = self.input.zero_point;
        let zout = self.output.zero_point;
        let lo = if self.relu { zout.max(-128) } else { -128 };
        let k = self.kernel;
        let plane = g.out_h * g.out_w;
        let mut out = vec![0i8; self.out_channels * plane];
        out.par_chunks_mut(plane).enumerate().for_each(|(o, dst)| {
            let wo = &self.weights[o * self.in_channels * k * k..(o + 1) * self.in_channels * k * k];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc: i32 = self.bias[o];
                    for c in 0..self.in_channels {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[(c * h + iy as usize) * w + ix as usize] as i32 - zin;
                                acc += wo[(c * k + ky) * k + kx] as i32 * xv;
                            }
                        }
                    }
                    let q = self.multipliers[o].apply(acc) + zout;
                    dst[oy * g.out_w + ox] = q.clamp(lo, 127) as i8;
                }
            }
        });
        Ok((out, g.out_h, g.out_w))
    }
}

/// The encoder with int8 weights and activations.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedEncoder {
    pub layers: Vec<QuantizedConv>,
    pub num_channels: usize,
}

impl QuantizedEncoder {
    /// Largest activation step size over the layer outputs.
    pub fn max_activation_scale(&self) -> f64 {
        self.layers.iter().map(|l| l.output.scale).fold(0.0, f64::max)
    }
}

/// Float encoder activations (after each layer's nonlinearity) for a batch.
fn float_activations(codec: &Codec, frames: &Tensor) -> Result<Vec<Tensor>> {
    let mut acts = Vec::with_capacity(3);
    let mut x = frames.clone();
    for (i, layer) in codec.encoder.layers.iter().enumerate() {
        let w = codec.params.tensor(layer.weight);
        let b = codec.params.tensor(layer.bias).data().to_vec();
        let mut y = conv2d_forward(&x, w, &b, layer.stride, layer.padding())?;
        if i < 2 {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(y.clone());
        x = y;
    }
    Ok(acts)
}

/// Builds the integer encoder from `codec`'s float weights and activation
/// ranges observed on `frames` (each 1×3×H×W, values in [0, 1]).
pub fn calibrate_encoder(codec: &Codec, frames: &[Tensor]) -> Result<QuantizedEncoder> {
    if frames.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if frames.len() < MIN_CALIBRATION_FRAMES {
        return Err(contract(format!(
            "calibration needs at least {MIN_CALIBRATION_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 3];
    for chunk in frames.chunks(16) {
        let acts = float_activations(codec, &Tensor::stack(chunk)?)?;
        for (r, a) in ranges.iter_mut().zip(&acts) {
            for &v in a.data() {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
    }
    let mut input = ActivationQuant {
        scale: INPUT_SCALE,
        zero_point: INPUT_ZERO_POINT,
    };
    let mut layers = Vec::with_capacity(3);
    for (i, layer) in codec.encoder.layers.iter().enumerate() {
        let output = ActivationQuant::from_range(ranges[i].0, ranges[i].1);
        layers.push(QuantizedConv::build(
            codec.params.tensor(layer.weight),
            codec.params.tensor(layer.bias).data(),
            layer.stride,
            input,
            output,
            i < 2,
        )?);
        input = output;
    }
    Ok(QuantizedEncoder {
        layers,
        num_channels: codec.num_channels(),
    })
}

/// Maps a 1×3×H×W frame in [0, 1] to the int8 input representation.
pub fn quantize_input(frame: &Tensor) -> Vec<i8> {
    frame
        .data()
        .iter()
        .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as i32 + INPUT_ZERO_POINT) as i8)
        .collect()
}

/// Runs the encoder in integer arithmetic and dequantizes the final layer
/// into a float latent.
pub fn int8_encode(frame: &Tensor, qenc: &QuantizedEncoder) -> Result<Latent> {
    let [n, c, h, w] = frame.shape().0;
    if n != 1 || c != 3 {
        return Err(Error::Shape {
            op: "int8_encode",
            detail: format!("expected one 3-channel frame, got {}", frame.shape()),
        });
    }
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::PaddingRequired { height: h, width: w });
    }
    let mut x = quantize_input(frame);
    let (mut ch, mut cw) = (h, w);
    for layer in &qenc.layers {
        let (y, oh, ow) = layer.forward(&x, ch, cw)?;
        x = y;
        ch = oh;
        cw = ow;
    }
    let last = qenc.layers.last().expect("three layers").output;
    let values = x.iter().map(|&q| last.dequantize(q)).collect();
    Latent::new(Tensor::new(Shape::new(1, qenc.num_channels, ch, cw), values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frames(count: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Tensor::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut rng)).collect()
    }

    #[test]
    fn fixed_multiplier_matches_real_product() {
        for &m in &[0.000_731, 0.013, 0.5, 0.999_999, 1.0, 3.7] {
            let f = FixedMultiplier::from_real(m).unwrap();
            assert!((f.to_real() - m).abs() <= m * 1e-9, "{m}");
            assert!((1 << 30..=i32::MAX).contains(&f.mantissa));
            for x in [-100_000, -7, 0, 1, 12_345, 1 << 20] {
                let exact = x as f64 * m;
                assert!((f.apply(x) as f64 - exact).abs() <= 0.5 + exact.abs() * 1e-9, "{m} {x}");
            }
        }
    }

    #[test]
    fn unit_range_weights_get_scale_one_over_127() {
        let w = Tensor::new(Shape::new(2, 2, 1, 1), vec![1.0, -0.5, -1.0, 0.25]).unwrap();
        let act = ActivationQuant::from_range(0.0, 1.0);
        let q = QuantizedConv::build(&w, &[0.0, 0.0], 1, act, act, false).unwrap();
        assert_eq!(q.weight_scales, vec![1.0 / 127.0, 1.0 / 127.0]);
        assert_eq!(q.weights, vec![127, -64, -127, 32]);
    }

    #[test]
    fn calibration_preconditions_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let codec = Codec::new(ModelConfig::desk_scale(), &mut rng).unwrap();
        assert!(matches!(calibrate_encoder(&codec, &[]), Err(Error::EmptyCalibration)));
        assert!(calibrate_encoder(&codec, &frames(4, 2)).is_err());
        let f = frames(16, 3);
        let a = calibrate_encoder(&codec, &f).unwrap();
        assert_eq!(a, calibrate_encoder(&codec, &f).unwrap());
        let z1 = int8_encode(&f[0], &a).unwrap();
        assert_eq!(z1, int8_encode(&f[0], &a).unwrap());
    }

    #[test]
    fn zero_input_with_zero_biases_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let codec = Codec::new(ModelConfig::desk_scale(), &mut rng).unwrap();
        let q = calibrate_encoder(&codec, &frames(16, 5)).unwrap();
        let z = int8_encode(&Tensor::zeros(Shape::new(1, 3, 32, 32)), &q).unwrap();
        assert!(z.tensor().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn integer_path_tracks_float_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let codec = Codec::new(ModelConfig::desk_scale(), &mut rng).unwrap();
        let f = frames(16, 7);
        let q = calibrate_encoder(&codec, &f).unwrap();
        let mut err = 0.0;
        let mut count = 0;
        for frame in &f {
            let a = codec.encode(frame).unwrap();
            let b = int8_encode(frame, &q).unwrap();
            err += a.tensor().data().iter().zip(b.tensor().data()).map(|(x, y)| (x - y).abs()).sum::<f64>();
            count += a.tensor().numel();
        }
        assert!(err / (count as f64) <= 2.0 * q.max_activation_scale());
    }
}
