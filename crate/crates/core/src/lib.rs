//! Fusion-in-encoder (FiE) extractive reader, built from scratch.
//!
//! The crate provides:
//!
//! - a small dense-array library with reverse-mode automatic differentiation
//!   and an independent finite-difference gradient oracle ([`tape`],
//!   [`gradcheck`]),
//! - a transformer encoder whose attention can fuse information across
//!   passages through global representation tokens, plus the ablation
//!   fusion modes and attention-pair instrumentation ([`encoder`]),
//! - a global probability space over answer spans: direct span scoring,
//!   string aggregation, marginal-likelihood and hard-EM objectives, and
//!   the alternative probability spaces ([`spans`]),
//! - closed-form attention-pair cost accounting with verification against
//!   the instrumented encoder and a forward-pass micro-benchmark
//!   ([`complexity`]),
//! - attention-rollout and global-token analyses ([`rollout`]),
//! - dataset ingestion, a synthetic cross-passage QA task generator, a
//!   deterministic training loop, checkpointing, and sweeps ([`data`],
//!   [`train`]).
//!
//! All continuous math is generic over the scalar type ([`Scalar`]), so a
//! run can select 32-bit or 64-bit precision; gradient checks use 64-bit.

pub mod checkpoint;
pub mod complexity;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod rollout;
pub mod scalar;
pub mod spans;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Array;

/// Single-precision array.
pub type Array32 = Array<f32>;
/// Double-precision array.
pub type Array64 = Array<f64>;
/// Single-precision tape.
pub type Tape32 = tape::Tape<f32>;
/// Double-precision tape.
pub type Tape64 = tape::Tape<f64>;

/// Single-precision model.
pub type Model32 = encoder::Model<f32>;
/// Double-precision model.
pub type Model64 = encoder::Model<f64>;
