//! Asymmetric progressive frame codec.
//!
//! A three-layer convolutional encoder produces an importance-ordered latent,
//! each channel is quantized to 5 bits, and the resulting bitstream can be cut
//! after any channel. The decoder zero-fills missing channels, so a sender can
//! match any bandwidth budget with a plain prefix of the stream.

pub mod autodiff;
pub mod bitstream;
pub mod error;
pub mod metrics;
pub mod model;
pub mod msssim;
pub mod ppm;
pub mod quant;
pub mod streamer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
