//! Block floating-point (BFP), microscaling (MxFP) and nanoscaling (NxFP)
//! block formats for direct-cast weight compression.
//!
//! Nanoscaling extends microscaling with three per-block features:
//!
//! * a 2-bit NanoMantissa in the shared scale (`scale = (1 + m/4) * 2^E`),
//! * a format bit choosing microexponent or all-mantissa elements per block,
//! * recycling of the otherwise unused `-0` element code.
//!
//! The [`quant`] module chooses these per block by minimizing squared error,
//! [`dequant`] decodes blocks exactly, [`container`] defines the bit-exact
//! `.nxt` layout, and [`analysis`] reproduces the error studies (feature
//! ablation, block-size, recycled-value and microexponent sweeps).

pub mod analysis;
pub mod container;
pub mod dequant;
pub mod error;
pub mod formats;
pub mod ingest;
pub mod quant;
pub mod sum;
pub mod tensor;

pub use container::{footprint_bits_per_element, PackedTensor};
pub use dequant::{dequantize_block, dequantize_tensor, gemm_dequant, DequantTarget, Operand};
pub use error::{Error, Result};
pub use formats::{
    build_level_table, decode_scalar, encode_scalar, ElementFormat, LevelTable, RecycleRule,
    RecycleSign, Recycling,
};
pub use ingest::{load_tensor, synth_weights, Dtype, SynthModel, TensorSource};
pub use quant::{
    nano_candidate, quantize_block, quantize_tensor, shared_exponent, BlockReport, BlockScale,
    Codec, ElementKind, NanoSearch, QuantConfig, QuantizedBlock,
};
pub use tensor::Tensor;
