//! Core algorithms for the LiPS panoptic segmentation pipeline.
//!
//! Everything in this crate is deterministic, single-threaded, and
//! `no_std`-compatible (allocation only). The companion `lips-cli` crate
//! carries file formats and the command-line interface.
//!
//! Layout:
//! - [`tensor`]: dense f32 tensors and the numeric kernels every stage is
//!   built from (convolution, linear maps, softmax, layer norm, bilinear
//!   sampling/resizing, sine positional encodings).
//! - [`encoder`]: a small convolutional backbone producing a 4-level
//!   feature pyramid at strides 4/8/16/32.
//! - [`routing`]: pyramid-level selection plus strided compression
//!   convolutions that shrink and re-channel the selected levels.
//! - [`pixel_decoder`]: multi-scale deformable-attention encoder layers over
//!   the compressed token sequence, followed by an FPN-style fusion that
//!   emits mask features at strides 8/16/32.
//! - [`query_decoder`]: masked-attention transformer decoder producing
//!   per-query class logits and mask logits.
//! - [`panoptic`]: conversion of decoder output into a panoptic id map.
//! - [`metrics`]: PQ / mIoU / mask-AP evaluation.
//! - [`cost`]: analytic MAC/parameter accounting that mirrors the forward
//!   implementation exactly, plus ablation sweeps.
//! - [`presets`]: named model configurations with external encoder cost
//!   tables for profiling.
//! - [`pipeline`]: weight construction and the end-to-end instrumented
//!   forward pass.

#![no_std]

extern crate alloc;

pub mod config;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod mathx;
pub mod metrics;
pub mod panoptic;
pub mod pipeline;
pub mod pixel_decoder;
pub mod presets;
pub mod query_decoder;
pub mod rng;
pub mod routing;
pub mod tensor;

pub use error::{Error, Result};
