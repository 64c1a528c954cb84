//! Contrastive visual explanations for convolutional networks.
//!
//! Answers "why P, rather than Q?" for a classifier or regressor by
//! backpropagating a contrast loss between the network output and a target
//! `Q` to the last convolutional layer, then weighting that layer's
//! activations Grad-CAM style.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: dense `f32` tensors, global average pool, normalization,
//!   bilinear resize.
//! - [`model`]: JSON manifest + binary blob store loader, validation, shape
//!   inference.
//! - [`engine`]: forward execution with cached activations and reverse-mode
//!   propagation to a layer; finite-difference gradient checks.
//! - [`contrast`]: cross-entropy / squared-error contrast seeds.
//! - [`cam`]: importance weights, map combination, sweeps and patch mode.
//! - [`visual`]: image decoding, preprocessing, overlays, PNG output.
//! - [`cli`]: the `contrastcam` command-line surface.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cam;
pub mod cli;
pub mod contrast;
pub mod engine;
mod error;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod toy;
pub mod visual;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
