//! Quantized-inference toolkit for small regression MLPs: quantization-aware
//! training under fixed-point and adaptive affine schemes, bit-exact
//! integer-only inference via multiplier/shift requantization, and a cycle
//! and energy model of the pipelined MAC datapath.

pub mod datakit;
pub mod harness;
pub mod hwsim;
pub mod intinfer;
pub mod mlp;
pub mod qat;
pub mod quantcore;

pub use datakit::{Dataset, NormStats};
pub use intinfer::QuantizedMlp;
pub use quantcore::QuantParams;
