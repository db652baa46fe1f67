//! Temporally factorized 3D convolution.
//!
//! A 3T filter is a 2D base slice plus one similarity transform per temporal
//! step; slice `t + 1` is slice `t` resampled through that transform. The
//! crate provides the transform and resampling primitives with exact
//! gradients, dense 3D convolution, a small trainable classifier, synthetic
//! affine-motion video, and tools for reading the learned transforms.

pub mod affine;
pub mod analysis;
pub mod conv;
pub mod data;
pub mod error;
pub mod filter;
pub mod gradcheck;
pub mod network;
pub mod par;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
