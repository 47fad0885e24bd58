//! Asymmetric encoder/decoder and the tail-dropout training forward pass.
//!
//! Encoder: three stride-2 3×3 convolutions (ReLU after the first two, none
//! after the last, so the latent keeps its full signed range for quantization).
//!
//! Decoder: three stages of nearest 2× upsample → 3×3 conv → ReLU → residual
//! bottlenecks, with an attention block after stages one and two, then a
//! 3×3 conv to RGB and a sigmoid.

pub mod blocks;
pub mod dropout;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamSet};
use crate::error::{contract, Error, Result};
use crate::tensor::{Shape, Tensor};
use blocks::{Attention, Bottleneck, Bound, ConvLayer};
pub use dropout::{keep_count, sample_drop_fraction, tail_drop, zero_fill, Latent};

/// Total spatial downsampling of the encoder.
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_latent_channels: usize,
    pub encoder_widths: [usize; 3],
    pub kernel_size: usize,
    pub decoder_base_width: usize,
    pub num_residual_blocks_per_stage: usize,
    /// (height, width) of frames the model is trained and evaluated on.
    pub input_size: (usize, usize),
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig {
            num_latent_channels: 12,
            encoder_widths: [24, 32, 12],
            kernel_size: 3,
            decoder_base_width: 64,
            num_residual_blocks_per_stage: 2,
            input_size: (224, 224),
        }
    }

    pub fn desk_scale() -> Self {
        ModelConfig {
            decoder_base_width: 32,
            input_size: (48, 48),
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_latent_channels;
        if n == 0 || n > 255 {
            return Err(contract(format!("latent channel count {n} outside 1..=255")));
        }
        if self.encoder_widths[2] != n {
            return Err(contract(format!(
                "last encoder width {} must equal the latent channel count {n}",
                self.encoder_widths[2]
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(contract("kernel size must be odd"));
        }
        if self.decoder_base_width < 4 {
            return Err(contract("decoder width must be at least 4"));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::PaddingRequired { height: h, width: w });
        }
        Ok(())
    }

    /// Channel widths of the three decoder stages (coarse to fine). The
    /// full-resolution stage runs at half width.
    pub fn decoder_widths(&self) -> [usize; 3] {
        let b = self.decoder_base_width;
        [b, b, b / 2]
    }

    pub fn latent_dims(&self) -> (usize, usize) {
        (self.input_size.0 / DOWNSAMPLE, self.input_size.1 / DOWNSAMPLE)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub layers: [ConvLayer; 3],
}

impl EncoderParams {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: ConvLayer,
    blocks: Vec<Bottleneck>,
    attention: Option<Attention>,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    stages: Vec<Stage>,
    output: ConvLayer,
}

impl DecoderParams {
    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| {
                s.conv.param_count()
                    + s.blocks.iter().map(Bottleneck::param_count).sum::<usize>()
                    + s.attention.as_ref().map_or(0, Attention::param_count)
            })
            .sum::<usize>()
            + self.output.param_count()
    }
}

/// Encoder and decoder sharing one parameter set.
#[derive(Clone, Debug)]
pub struct Codec {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl Codec {
    /// Builds a freshly initialised model. Parameter names and order depend
    /// only on the config, so a checkpoint can be loaded into `Codec::new`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let k = config.kernel_size;
        let [w1, w2, w3] = config.encoder_widths;
        let encoder = EncoderParams {
            layers: [
                ConvLayer::register(&mut params, "enc.0", 3, w1, k, 2, 1.0, rng)?,
                ConvLayer::register(&mut params, "enc.1", w1, w2, k, 2, 1.0, rng)?,
                ConvLayer::register(&mut params, "enc.2", w2, w3, k, 2, 0.5, rng)?,
            ],
        };
        let widths = config.decoder_widths();
        let mut stages = Vec::with_capacity(3);
        let mut in_ch = config.num_latent_channels;
        for (s, &width) in widths.iter().enumerate() {
            let conv = ConvLayer::register(&mut params, &format!("dec.{s}.conv"), in_ch, width, 3, 1, 1.0, rng)?;
            let blocks = (0..config.num_residual_blocks_per_stage)
                .map(|b| Bottleneck::register(&mut params, &format!("dec.{s}.res{b}"), width, rng))
                .collect::<Result<Vec<_>>>()?;
            let attention = if s < 2 {
                Some(Attention::register(&mut params, &format!("dec.{s}.attn"), width, rng)?)
            } else {
                None
            };
            stages.push(Stage { conv, blocks, attention });
            in_ch = width;
        }
        let output = ConvLayer::register(&mut params, "dec.out", in_ch, 3, 3, 1, 0.5, rng)?;
        Ok(Codec {
            config,
            params,
            encoder,
            decoder: DecoderParams { stages, output },
        })
    }

    pub fn num_channels(&self) -> usize {
        self.config.num_latent_channels
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder.param_count()
    }

    pub fn decoder_param_count(&self) -> usize {
        self.decoder.param_count()
    }

    /// Records the encoder on `g`; returns the latent node (B, N, H/8, W/8).
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, frames: NodeId) -> Result<NodeId> {
        let [l1, l2, l3] = &self.encoder.layers;
        let h = l1.apply(g, p, frames)?;
        let h = g.relu(h);
        let h = l2.apply(g, p, h)?;
        let h = g.relu(h);
        l3.apply(g, p, h)
    }

    /// Records the decoder on `g`; returns the reconstruction node in [0, 1].
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, latent: NodeId) -> Result<NodeId> {
        let mut h = latent;
        for stage in &self.decoder.stages {
            h = g.upsample_nearest_2x(h);
            h = stage.conv.apply(g, p, h)?;
            h = g.relu(h);
            for block in &stage.blocks {
                h = block.apply(g, p, h)?;
            }
            if let Some(att) = &stage.attention {
                h = att.apply(g, p, h)?;
            }
        }
        let out = self.decoder.output.apply(g, p, h)?;
        Ok(g.sigmoid(out))
    }

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        let [_, c, h, w] = frames.shape().0;
        if c != 3 {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("expected 3 colour channels, got {c}"),
            });
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::PaddingRequired { height: h, width: w });
        }
        Ok(())
    }

    /// Encodes a batch of frames into a (B, N, H/8, W/8) tensor.
    pub fn encode_batch(&self, frames: &Tensor) -> Result<Tensor> {
        self.check_frames(frames)?;
        let mut g = Graph::new();
        let p = Bound::all(&mut g, &self.params);
        let x = g.constant(frames.clone());
        let z = self.encode_graph(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }

    pub fn encode(&self, frame: &Tensor) -> Result<Latent> {
        if frame.shape().batch() != 1 {
            return Err(contract("encode takes a single frame; use encode_batch"));
        }
        Latent::new(self.encode_batch(frame)?)
    }

    /// Decodes a (B, N, h, w) latent batch.
    pub fn decode_batch(&self, latent: &Tensor) -> Result<Tensor> {
        let n = self.num_channels();
        if latent.shape().channels() != n {
            return Err(Error::Shape {
                op: "decode",
                detail: format!("latent has {} channels, model expects {n}", latent.shape().channels()),
            });
        }
        let mut g = Graph::new();
        let p = Bound::all(&mut g, &self.params);
        let z = g.constant(latent.clone());
        let out = self.decode_graph(&mut g, &p, z)?;
        Ok(g.value(out).clone())
    }

    pub fn decode(&self, z: &Latent) -> Result<Tensor> {
        self.decode_batch(z.tensor())
    }

    /// Training forward pass for one frame: encode, add uniform noise of width
    /// `quant_steps[c]` per channel, tail-drop with a freshly sampled `k`,
    /// decode. Returns the reconstruction and `k`.
    pub fn forward_train<R: Rng + ?Sized>(&self, frame: &Tensor, rng: &mut R, quant_steps: &[f64]) -> Result<(Tensor, f64)> {
        let k = sample_drop_fraction(rng);
        let recon = self.forward_with_drop(frame, k, rng, quant_steps)?;
        Ok((recon, k))
    }

    /// [`Codec::forward_train`] with a fixed drop fraction.
    pub fn forward_with_drop<R: Rng + ?Sized>(&self, frame: &Tensor, k: f64, rng: &mut R, quant_steps: &[f64]) -> Result<Tensor> {
        if frame.shape().batch() != 1 {
            return Err(contract("forward_train takes a single frame"));
        }
        let keep = keep_count(self.num_channels(), k)?;
        let latent = self.encode(frame)?;
        let noise = latent_noise(latent.tensor().shape(), quant_steps, rng)?;
        let mut g = Graph::new();
        let p = Bound::all(&mut g, &self.params);
        let z = g.constant(latent.into_tensor());
        let nz = g.constant(noise);
        let noisy = g.add(z, nz)?;
        let mask = g.constant(keep_mask(g.value(noisy).shape(), &[keep]));
        let dropped = g.mul(noisy, mask)?;
        let out = self.decode_graph(&mut g, &p, dropped)?;
        Ok(g.value(out).clone())
    }
}

/// Uniform noise in (−step/2, step/2) per element, one step per channel.
pub fn latent_noise<R: Rng + ?Sized>(shape: Shape, steps: &[f64], rng: &mut R) -> Result<Tensor> {
    let [n, c, h, w] = shape.0;
    if steps.len() != c {
        return Err(contract(format!("{} noise steps for {c} latent channels", steps.len())));
    }
    let mut t = Tensor::zeros(shape);
    for item in 0..n {
        for (ch, &step) in steps.iter().enumerate() {
            for v in t.plane_mut(item, ch) {
                *v = (rng.random::<f64>() - 0.5) * step;
            }
        }
    }
    debug_assert_eq!(t.numel(), n * c * h * w);
    Ok(t)
}

/// 1 for channels below each item's keep count, 0 above.
pub fn keep_mask(shape: Shape, keep: &[usize]) -> Tensor {
    let [n, c, _, _] = shape.0;
    let mut t = Tensor::zeros(shape);
    for item in 0..n {
        let k = keep[item.min(keep.len() - 1)];
        for ch in 0..c.min(k) {
            t.plane_mut(item, ch).fill(1.0);
        }
    }
    t
}
