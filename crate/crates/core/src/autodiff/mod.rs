//! Minimal reverse-mode differentiation: a tape, convolution kernels, and Adam.

pub mod adam;
pub mod conv;
pub mod graph;
pub mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, NodeId};
pub use params::{ParamId, ParamSet, Parameter};
