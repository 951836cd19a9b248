//! Hyperbolic feature alignment fused with selective state-space sequence
//! modeling, built on a from-scratch tape-based reverse-mode engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense tensors and reverse-mode differentiation
//!   over exactly the operation set the model needs.
//! - [`gradcheck`]: finite-difference verification harness.
//! - [`hyperbolic`]: Poincare-ball geometry, adaptive curvature, and the
//!   similarity-alignment loss.
//! - [`ssm`]: zero-order-hold discretization, selective scans, and the
//!   Mamba-style sequence block.
//! - [`fusion`]: the two-stream cross-fusion block with a shared
//!   visual-derived gate.
//! - [`model`]: the end-to-end audio-visual question-answering model.
//! - [`data`]: synthetic dataset generation, the binary tensor file
//!   format, and dataset manifests.
//!
//! All numeric code is generic over the scalar type via [`real::Real`];
//! the aliases below fix the 64-bit instantiation the training stack and
//! the verification suites use.

pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod hyperbolic;
pub mod model;
pub mod params;
pub mod real;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;

/// 64-bit tensor, the default precision of the crate.
pub type Tensor64 = tensor::Tensor<f64>;
/// 32-bit tensor, matching the on-disk payload precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// 64-bit tape.
pub type Tape64 = tape::Tape<f64>;
/// 64-bit curvature context.
pub type Curvature64 = hyperbolic::Curvature<f64>;
