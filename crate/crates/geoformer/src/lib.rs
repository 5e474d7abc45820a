//! Geometry-aware transformer for molecular property and force prediction.
//!
//! The crate provides, from the ground up:
//!
//! * a dense-tensor library with reverse-mode automatic differentiation whose
//!   backward pass is itself differentiable (one nested level), enough to
//!   train on predicted forces;
//! * molecule ingestion (extended XYZ), deterministic splits and padded
//!   batching over interatomic distance matrices;
//! * a geometric positional encoder plus a Laplacian-eigenmap baseline;
//! * multi-head self-attention with distance conditioning in four switchable
//!   variants, including gating by a learned per-head metric of the inverse
//!   distance;
//! * molecule-mixup augmentation (far-separated two-molecule systems with
//!   summed labels);
//! * the full training stack: L1 and force-matching objectives, Adam,
//!   plateau learning-rate decay, metrics and bit-exact checkpoints.

pub mod attention;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod pe;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
