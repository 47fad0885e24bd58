//! Latent quantization and the integer-only encoder.

pub mod channel;
pub mod int8;

pub use channel::{
    dequantize_channel, quantize_channel, quantize_latent, quantize_with, ChannelQuantParams, QuantizedChannel,
    QuantizedLatent, LATENT_BITS,
};
pub use int8::{calibrate_encoder, int8_encode, QuantizedEncoder};
