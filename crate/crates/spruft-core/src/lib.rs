//! Core library for row-sparse fine-tuning of frozen networks.
//!
//! Everything numeric lives here: a dense `f64` tensor type, a tape-based
//! reverse-mode autodiff engine that keeps an explicit ledger of the buffers
//! its backward pass retains, small neural layers (linear, layer norm,
//! a single-block transformer encoder), additive fine-tuning adapters
//! (row-selection, LoRA, vector, dependency-grouped), neuron importance
//! metrics (magnitude, Taylor, class-aware quantiles-mean, zeroth-order via
//! SPSA), analytic memory accounting, and a deterministic Adam trainer with
//! synthetic classification tasks.
//!
//! The crate is `no_std` (with `alloc`); all floating-point math goes through
//! `libm`, so results are bit-identical across platforms. IO, file formats,
//! and the command-line front end live in the companion `spruft-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adapters;
pub mod forward;
pub mod importance;
pub mod layers;
pub mod memory;
pub mod rng;
pub mod spsa;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tensor::{Tensor, TensorError};
