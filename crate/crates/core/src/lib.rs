//! Dual-student knowledge-distillation anomaly detection.
//!
//! A frozen vision-transformer teacher feeds two students: an encoder
//! student distilled on class tokens (global, semantic discrepancies) and a
//! decoder student reconstructing grouped mid-level patch features through a
//! noisy bottleneck (local, structural discrepancies). The branch losses are
//! trained jointly through a Noisy-OR objective and fused into one anomaly
//! score at inference.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the two concrete instantiations.

#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod diffcore;
pub mod distill;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod vitnet;

pub use error::{Error, Result};
pub use rng::{Rng, RngState};
pub use scalar::Scalar;

pub type Tensor64 = diffcore::Tensor<f64>;
pub type Tensor32 = diffcore::Tensor<f32>;
pub type Graph64 = diffcore::Graph<f64>;
pub type Graph32 = diffcore::Graph<f32>;
