//! Low-bit compression of fine-tuning deltas with salient input channels
//! kept in half precision, plus multi-expert serving over one shared base.
//!
//! - [`numerics`]: dense FP32 matrices, binary16 storage, Jacobi SVD, seeded RNG
//! - [`quant`]: uniform per-output-channel quantization, binary fallback, STE, bit-packing
//! - [`salient`]: input-channel scoring and top-k selection
//! - [`compress`]: the layer pipeline, step-size distillation, baselines, the `MESW` artifact
//! - [`toylm`]: byte-level toy language model used as base and experts
//! - [`infer`]: fused packed-delta matvec and batched multi-expert forward
//! - [`registry`]: budgeted LRU residency of expert artifacts
//! - [`router`]: query-to-domain classification and the routing prompt
//! - [`analytics`]: compression ratio and singular-value energy reports
//! - [`serve`]: newline-delimited JSON TCP daemon

pub mod analytics;
pub mod compress;
pub mod error;
pub mod infer;
pub mod numerics;
pub mod quant;
pub mod registry;
pub mod router;
pub mod salient;
pub mod serve;
pub mod toylm;

pub use error::{Error, Result};
pub use numerics::{matvec, DenseMatrix, Rng};
